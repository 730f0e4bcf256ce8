#include "movelab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace movelab {

namespace {

struct TensorRecord {
  std::string name;
  StorageDtype dtype;
  Shape shape;
  int64_t offset = 0;
};

int64_t dtype_size(StorageDtype d) { return d == StorageDtype::f64 ? 8 : 4; }

void write_tensor(std::ostream& out, const Array& a, StorageDtype dtype) {
  if (dtype == StorageDtype::f64) {
    out.write(reinterpret_cast<const char*>(a.ptr()), a.numel() * 8);
  } else {
    std::vector<float> tmp(static_cast<size_t>(a.numel()));
    for (int64_t i = 0; i < a.numel(); ++i) tmp[static_cast<size_t>(i)] = static_cast<float>(a.data()[i]);
    out.write(reinterpret_cast<const char*>(tmp.data()), a.numel() * 4);
  }
}

Array read_tensor(const std::vector<char>& blob, const TensorRecord& rec) {
  const int64_t count = shape_numel(rec.shape);
  const int64_t bytes = count * dtype_size(rec.dtype);
  if (rec.offset < 0 || rec.offset + bytes > static_cast<int64_t>(blob.size()))
    throw std::runtime_error("checkpoint: tensor '" + rec.name + "' extends past the data section (truncated file?)");
  Array a(rec.shape);
  if (rec.dtype == StorageDtype::f64) {
    std::memcpy(a.ptr(), blob.data() + rec.offset, static_cast<size_t>(bytes));
  } else {
    std::vector<float> tmp(static_cast<size_t>(count));
    std::memcpy(tmp.data(), blob.data() + rec.offset, static_cast<size_t>(bytes));
    for (int64_t i = 0; i < count; ++i) a.ptr()[i] = static_cast<double>(tmp[static_cast<size_t>(i)]);
  }
  return a;
}

}  // namespace

void checkpoint_save(const std::filesystem::path& path, const ModelParams& params, const AdamState* optimizer,
                     StorageDtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint_save: cannot open " + path.string());

  std::vector<std::pair<std::string, const Array*>> tensors;
  params.for_each_tensor([&](const std::string& name, const Array& a) { tensors.emplace_back(name, &a); });
  const size_t model_count = tensors.size();
  if (optimizer) {
    if (optimizer->m.size() != model_count || optimizer->v.size() != model_count)
      throw std::invalid_argument("checkpoint_save: optimizer state does not match the model tensor list");
    for (size_t i = 0; i < model_count; ++i) tensors.emplace_back("adam.m." + tensors[i].first, &optimizer->m[i]);
    for (size_t i = 0; i < model_count; ++i) tensors.emplace_back("adam.v." + tensors[i].first, &optimizer->v[i]);
  }

  out << "movelab-checkpoint v1\n";
  for (const auto& [key, value] : config_to_kv(params.config)) out << "meta " << key << ' ' << value << '\n';
  out << "meta params_version " << params.version << '\n';
  if (optimizer) out << "meta adam_step " << optimizer->step << '\n';
  const char* dname = dtype == StorageDtype::f64 ? "f64" : "f32";
  int64_t offset = 0;
  for (const auto& [name, a] : tensors) {
    out << "tensor " << name << ' ' << dname << ' ' << a->ndim();
    for (int64_t d : a->shape()) out << ' ' << d;
    out << ' ' << offset << '\n';
    offset += a->numel() * dtype_size(dtype);
  }
  out << "data " << offset << '\n';
  for (const auto& [name, a] : tensors) write_tensor(out, *a, dtype);
  if (!out) throw std::runtime_error("checkpoint_save: write failed for " + path.string());
}

LoadedCheckpoint checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint_load: cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line) || line != "movelab-checkpoint v1")
    throw std::runtime_error("checkpoint_load: " + path.string() + " is not a movelab checkpoint");

  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<TensorRecord> records;
  int64_t data_bytes = -1;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key, value;
      ls >> key >> value;
      meta.emplace_back(key, value);
    } else if (kind == "tensor") {
      TensorRecord rec;
      std::string dname;
      int64_t ndim = 0;
      ls >> rec.name >> dname >> ndim;
      if (dname == "f64") rec.dtype = StorageDtype::f64;
      else if (dname == "f32") rec.dtype = StorageDtype::f32;
      else throw std::runtime_error("checkpoint_load: unknown dtype '" + dname + "'");
      rec.shape.resize(static_cast<size_t>(ndim));
      for (auto& d : rec.shape) ls >> d;
      ls >> rec.offset;
      if (!ls) throw std::runtime_error("checkpoint_load: malformed tensor line '" + line + "'");
      records.push_back(std::move(rec));
    } else if (kind == "data") {
      ls >> data_bytes;
      break;
    } else {
      throw std::runtime_error("checkpoint_load: unexpected manifest line '" + line + "'");
    }
  }
  if (data_bytes < 0) throw std::runtime_error("checkpoint_load: manifest missing data section");

  std::vector<char> blob(static_cast<size_t>(data_bytes));
  in.read(blob.data(), data_bytes);
  if (in.gcount() != data_bytes)
    throw std::runtime_error("checkpoint_load: truncated data section in " + path.string() + " (expected " +
                             std::to_string(data_bytes) + " bytes, got " + std::to_string(in.gcount()) + ")");

  ModelConfig config = config_from_kv(meta);
  ModelParams params = build_model(config);
  for (const auto& [key, value] : meta) {
    if (key == "params_version") params.version = std::stoull(value);
  }

  // Validate the manifest against the freshly built skeleton before touching
  // any tensor data.
  std::vector<std::pair<std::string, Array*>> slots;
  params.for_each_tensor([&](const std::string& name, Array& a) { slots.emplace_back(name, &a); });
  size_t next_model_tensor = 0;
  std::vector<std::pair<size_t, const TensorRecord*>> model_loads;
  std::vector<const TensorRecord*> adam_m, adam_v;
  for (const TensorRecord& rec : records) {
    if (rec.name.rfind("adam.m.", 0) == 0) {
      adam_m.push_back(&rec);
      continue;
    }
    if (rec.name.rfind("adam.v.", 0) == 0) {
      adam_v.push_back(&rec);
      continue;
    }
    if (next_model_tensor >= slots.size())
      throw std::runtime_error("checkpoint_load: unexpected extra tensor '" + rec.name + "'");
    const auto& [name, slot] = slots[next_model_tensor];
    if (rec.name != name)
      throw std::runtime_error("checkpoint_load: manifest tensor '" + rec.name + "' does not match expected '" +
                               name + "'");
    if (!shapes_equal(rec.shape, slot->shape()))
      throw std::runtime_error("checkpoint_load: tensor '" + rec.name + "' has shape " + shape_str(rec.shape) +
                               ", expected " + shape_str(slot->shape()));
    model_loads.emplace_back(next_model_tensor, &rec);
    ++next_model_tensor;
  }
  if (next_model_tensor != slots.size())
    throw std::runtime_error("checkpoint_load: manifest is missing model tensors (found " +
                             std::to_string(next_model_tensor) + " of " + std::to_string(slots.size()) + ")");
  if (!adam_m.empty() && (adam_m.size() != slots.size() || adam_v.size() != slots.size()))
    throw std::runtime_error("checkpoint_load: incomplete optimizer state in manifest");

  LoadedCheckpoint loaded;
  for (const auto& [index, rec] : model_loads) *slots[index].second = read_tensor(blob, *rec);

  if (!adam_m.empty()) {
    AdamState opt;
    for (const auto& [key, value] : meta) {
      if (key == "adam_step") opt.step = std::stoll(value);
    }
    for (size_t i = 0; i < slots.size(); ++i) {
      if (adam_m[i]->name != "adam.m." + slots[i].first || adam_v[i]->name != "adam.v." + slots[i].first)
        throw std::runtime_error("checkpoint_load: optimizer tensors out of order at '" + adam_m[i]->name + "'");
      opt.m.push_back(read_tensor(blob, *adam_m[i]));
      opt.v.push_back(read_tensor(blob, *adam_v[i]));
    }
    loaded.optimizer = std::move(opt);
  }
  loaded.params = std::move(params);
  return loaded;
}

}  // namespace movelab
