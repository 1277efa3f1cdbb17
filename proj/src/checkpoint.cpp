#include "ominictl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "ominictl/config.hpp"
#include "ominictl/errors.hpp"

namespace omini {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'O', 'D', 'I', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  }
  return v;
}

std::string get_string(std::istream& in, std::uint64_t n, const char* what) {
  if (n > (1ull << 32)) throw FormatError(std::string("checkpoint: implausible ") + what);
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  }
  return s;
}

void add_adapters(const Model& model, CheckpointData& d) {
  for (const LoraAdapter* a : model.adapters()) {
    d.tensors.push_back({a->down.name, a->down.value});
    d.tensors.push_back({a->up.name, a->up.value});
    if (!a->enabled) d.disabled_adapters.push_back(a->binding);
  }
}

}  // namespace

CheckpointData snapshot(const Model& model, const AdamW* optimizer) {
  CheckpointData d;
  d.kind = "full";
  d.config = model.config();
  for (const Parameter* p : model.base_parameters()) d.tensors.push_back({p->name, p->value});
  d.tensors.push_back({model.codec().encoder.name, model.codec().encoder.value});
  d.tensors.push_back({model.codec().decoder.name, model.codec().decoder.value});
  add_adapters(model, d);
  if (optimizer != nullptr) {
    auto& opt = const_cast<AdamW&>(*optimizer);
    d.optimizer_step = opt.step_count();
    for (std::size_t k = 0; k < opt.params().size(); ++k) {
      d.tensors.push_back({"optimizer/m/" + opt.params()[k]->name, opt.first_moments()[k]});
      d.tensors.push_back({"optimizer/v/" + opt.params()[k]->name, opt.second_moments()[k]});
    }
  }
  return d;
}

CheckpointData snapshot_adapters(const Model& model) {
  CheckpointData d;
  d.kind = "adapters";
  d.config = model.config();
  add_adapters(model, d);
  return d;
}

void write_checkpoint(std::ostream& out, const CheckpointData& data) {
  Json header;
  header["kind"] = data.kind;
  header["model"] = to_json(data.config);
  header["disabled_adapters"] = data.disabled_adapters;
  header["optimizer_step"] =
      data.optimizer_step ? Json(*data.optimizer_step) : Json(nullptr);
  header["task"] = data.task ? Json(std::string(to_string(*data.task))) : Json(nullptr);
  const std::string h = header.dump();
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  put<std::uint64_t>(out, data.tensors.size());
  for (const NamedTensor& t : data.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint8_t>(out, kDtypeF64);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!out) throw FormatError("checkpoint: write failed");
}

CheckpointData read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic (not an ODIT file)");
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto hlen = get<std::uint64_t>(in, "header length");
  const std::string h = get_string(in, hlen, "header");
  CheckpointData d;
  try {
    const Json header = Json::parse(h);
    d.kind = header.at("kind").get<std::string>();
    d.config = model_config_from_json(header.at("model"));
    d.disabled_adapters = header.at("disabled_adapters").get<std::vector<std::string>>();
    if (!header.at("optimizer_step").is_null()) {
      d.optimizer_step = header.at("optimizer_step").get<std::size_t>();
    }
    if (header.contains("task") && !header.at("task").is_null()) {
      d.task = parse_task_kind(header.at("task").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid header: ") + e.what());
  }
  if (d.kind != "full" && d.kind != "adapters") {
    throw FormatError("checkpoint: unknown kind '" + d.kind + "'");
  }
  const auto count = get<std::uint64_t>(in, "tensor count");
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = get_string(in, get<std::uint32_t>(in, "name length"), "tensor name");
    if (get<std::uint8_t>(in, "dtype") != kDtypeF64) {
      throw FormatError("checkpoint: unsupported dtype for " + t.name);
    }
    const auto rank = get<std::uint32_t>(in, "rank");
    if (rank > 8) throw FormatError("checkpoint: implausible rank for " + t.name);
    std::vector<std::size_t> shape(rank);
    std::uint64_t n = 1;
    for (auto& s : shape) {
      s = get<std::uint64_t>(in, "shape");
      n *= s;
    }
    if (n > (1ull << 31)) throw FormatError("checkpoint: implausible size for " + t.name);
    std::vector<double> payload(n);
    if (n > 0 && !in.read(reinterpret_cast<char*>(payload.data()),
                          static_cast<std::streamsize>(n * sizeof(double)))) {
      throw FormatError("checkpoint: truncated payload for " + t.name);
    }
    t.value = Tensor(std::move(shape), std::move(payload));
    d.tensors.push_back(std::move(t));
  }
  return d;
}

namespace {

using TensorMap = std::map<std::string, const Tensor*>;

TensorMap index(const CheckpointData& d) {
  TensorMap m;
  for (const NamedTensor& t : d.tensors) {
    if (!m.emplace(t.name, &t.value).second) {
      throw FormatError("checkpoint: duplicate tensor " + t.name);
    }
  }
  return m;
}

void assign(Parameter& p, const TensorMap& m) {
  auto it = m.find(p.name);
  if (it == m.end()) throw FormatError("checkpoint: missing tensor " + p.name);
  if (!it->second->same_shape(p.value)) {
    throw FormatError("checkpoint: shape mismatch for " + p.name + ": " +
                      shape_string(it->second->shape()) + " vs " + shape_string(p.value.shape()));
  }
  p.value = *it->second;
}

void load_adapters(Model& model, const CheckpointData& d, const TensorMap& m) {
  std::size_t expected = 0;
  for (LoraAdapter* a : model.adapters()) {
    assign(a->down, m);
    assign(a->up, m);
    a->enabled = std::find(d.disabled_adapters.begin(), d.disabled_adapters.end(),
                           a->binding) == d.disabled_adapters.end();
    expected += 2;
  }
  std::size_t present = 0;
  for (const NamedTensor& t : d.tensors) {
    if (t.name.ends_with("/down") || t.name.ends_with("/up")) {
      if (!t.name.starts_with("optimizer/")) ++present;
    }
  }
  if (present != expected) {
    throw FormatError("checkpoint: " + std::to_string(present) + " adapter tensors for " +
                      std::to_string(expected) + " adapter slots");
  }
}

}  // namespace

Model model_from_checkpoint(const CheckpointData& d) {
  if (d.kind != "full") throw FormatError("checkpoint: adapter-only file has no base weights");
  Model model(d.config);
  const TensorMap m = index(d);
  for (Parameter* p : model.base_parameters()) assign(*p, m);
  assign(model.codec().encoder, m);
  assign(model.codec().decoder, m);
  load_adapters(model, d, m);
  return model;
}

void restore_optimizer(const CheckpointData& d, AdamW& opt) {
  if (!d.optimizer_step) throw FormatError("checkpoint: no optimizer state saved");
  const TensorMap m = index(d);
  for (std::size_t k = 0; k < opt.params().size(); ++k) {
    const std::string& name = opt.params()[k]->name;
    auto mi = m.find("optimizer/m/" + name), vi = m.find("optimizer/v/" + name);
    if (mi == m.end() || vi == m.end()) {
      throw FormatError("checkpoint: missing optimizer state for " + name);
    }
    opt.first_moments()[k] = *mi->second;
    opt.second_moments()[k] = *vi->second;
  }
  opt.set_step_count(*d.optimizer_step);
}

void attach_adapters(Model& base, const CheckpointData& d) {
  const ModelConfig& bc = base.config();
  const ModelConfig& ac = d.config;
  if (bc.d_model != ac.d_model || bc.n_heads != ac.n_heads ||
      bc.n_dual_blocks != ac.n_dual_blocks || bc.n_single_blocks != ac.n_single_blocks ||
      bc.mlp_ratio != ac.mlp_ratio || bc.lora_rank != ac.lora_rank ||
      bc.lora_targets != ac.lora_targets || bc.lora_depth != ac.lora_depth ||
      bc.lora_alpha != ac.lora_alpha) {
    throw FormatError("checkpoint: adapter layout does not match the base model");
  }
  load_adapters(base, d, index(d));
}

void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw FormatError("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, target);
}

namespace {

std::string serialize(const CheckpointData& d) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, d);
  return os.str();
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const AdamW* optimizer,
                     std::optional<TaskKind> task) {
  CheckpointData d = snapshot(model, optimizer);
  d.task = task;
  write_file_atomic(path, serialize(d));
}

void save_adapters(const std::string& path, const Model& model, std::optional<TaskKind> task) {
  CheckpointData d = snapshot_adapters(model);
  d.task = task;
  write_file_atomic(path, serialize(d));
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

Model load_model(const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); }

}  // namespace omini
