#include "pls/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pls/errors.hpp"

namespace pls {

namespace {

using json = nlohmann::json;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const uint8_t* p;
  const uint8_t* end;
  std::string path;

  void need(size_t n) const {
    if (static_cast<size_t>(end - p) < n)
      throw IoError("truncated checkpoint: " + path);
  }
  uint8_t u8() {
    need(1);
    return *p++;
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(p[0]) | static_cast<uint16_t>(p[1]) << 8;
    p += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    p += 4;
    return v;
  }
};

size_t dtype_size(Dtype d) { return d == Dtype::Single ? 4 : 8; }

bool host_is_little_endian() {
  const uint16_t probe = 1;
  uint8_t b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

// Element payloads are stored little-endian; byte-swap on big-endian hosts.
void to_little_endian(std::vector<uint8_t>& bytes, size_t width) {
  if (host_is_little_endian()) return;
  for (size_t i = 0; i + width <= bytes.size(); i += width)
    for (size_t j = 0; j < width / 2; ++j) std::swap(bytes[i + j], bytes[i + width - 1 - j]);
}

}  // namespace

void write_pls1(const std::string& path, const std::vector<RawTensor>& tensors) {
  std::string buf;
  buf.append("PLS1", 4);
  put_u16(buf, kCheckpointVersion);
  put_u32(buf, static_cast<uint32_t>(tensors.size()));
  for (const RawTensor& t : tensors) {
    if (t.name.size() > 0xffff) throw IoError("tensor name too long: " + t.name);
    const size_t expect = t.element_count() * dtype_size(t.dtype);
    if (t.bytes.size() != expect)
      throw IoError("tensor '" + t.name + "' payload is " + std::to_string(t.bytes.size()) +
                    " bytes, dims require " + std::to_string(expect));
    put_u16(buf, static_cast<uint16_t>(t.name.size()));
    buf.append(t.name);
    buf.push_back(static_cast<char>(t.dtype));
    buf.push_back(static_cast<char>(t.dims.size()));
    for (uint32_t d : t.dims) put_u32(buf, d);
    std::vector<uint8_t> payload = t.bytes;
    to_little_endian(payload, dtype_size(t.dtype));
    buf.append(reinterpret_cast<const char*>(payload.data()), payload.size());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write failed: " + path);
}

std::vector<RawTensor> read_pls1(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::vector<uint8_t> blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{blob.data(), blob.data() + blob.size(), path};

  r.need(4);
  if (std::memcmp(r.p, "PLS1", 4) != 0) throw IoError("bad magic, not a PLS1 file: " + path);
  r.p += 4;
  const uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  const uint32_t count = r.u32();

  std::vector<RawTensor> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    RawTensor t;
    const uint16_t name_len = r.u16();
    r.need(name_len);
    t.name.assign(reinterpret_cast<const char*>(r.p), name_len);
    r.p += name_len;
    const uint8_t dt = r.u8();
    if (dt > 1) throw IoError("unknown dtype code " + std::to_string(dt) + " in " + path);
    t.dtype = static_cast<Dtype>(dt);
    const uint8_t rank = r.u8();
    t.dims.resize(rank);
    for (uint8_t d = 0; d < rank; ++d) t.dims[d] = r.u32();
    const size_t payload = t.element_count() * dtype_size(t.dtype);
    r.need(payload);
    t.bytes.assign(r.p, r.p + payload);
    to_little_endian(t.bytes, dtype_size(t.dtype));  // swap back on big-endian hosts
    r.p += payload;
    out.push_back(std::move(t));
  }
  if (r.p != r.end) throw IoError("trailing bytes after last tensor: " + path);
  return out;
}

template <typename T>
std::vector<RawTensor> to_raw(const ParamStore<T>& params) {
  std::vector<RawTensor> out;
  out.reserve(params.size());
  for (const auto& [name, tensor] : params.items) {
    RawTensor t;
    t.name = name;
    t.dtype = dtype_of<T>();
    for (size_t d : tensor.dims) t.dims.push_back(static_cast<uint32_t>(d));
    t.bytes.resize(tensor.data.size() * sizeof(T));
    std::memcpy(t.bytes.data(), tensor.data.data(), t.bytes.size());
    out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
ParamStore<T> from_raw(const std::vector<RawTensor>& tensors) {
  ParamStore<T> store;
  for (const RawTensor& t : tensors) {
    if (t.dtype != dtype_of<T>())
      throw IoError("tensor '" + t.name + "' is " + std::string(dtype_name(t.dtype)) +
                    ", requested " + std::string(dtype_name(dtype_of<T>())));
    Tensor<T> tensor;
    for (uint32_t d : t.dims) tensor.dims.push_back(d);
    tensor.data.resize(t.element_count());
    std::memcpy(tensor.data.data(), t.bytes.data(), t.bytes.size());
    store.add(t.name, std::move(tensor));
  }
  return store;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params,
                     const CheckpointMeta& meta) {
  write_pls1(path, to_raw(params));

  json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["config_hash"] = meta.config_hash;
  manifest["seed"] = meta.seed;
  manifest["iter"] = meta.iter;
  manifest["dtype"] = dtype_name(dtype_of<T>());
  manifest["model"] = meta.model_json.empty() ? json(nullptr) : json::parse(meta.model_json);
  manifest["extra"] = meta.extra_json.empty() ? json(nullptr) : json::parse(meta.extra_json);

  std::ofstream f(path + ".json", std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path + ".json");
  f << manifest.dump(2) << "\n";
  if (!f) throw IoError("write failed: " + path + ".json");
}

template <typename T>
ParamStore<T> read_params(const std::string& path) {
  return from_raw<T>(read_pls1(path));
}

Dtype checkpoint_dtype(const std::string& path) {
  const std::vector<RawTensor> tensors = read_pls1(path);
  if (tensors.empty()) throw IoError("checkpoint holds no tensors: " + path);
  return tensors.front().dtype;
}

CheckpointMeta read_manifest(const std::string& path) {
  const std::string mpath = path + ".json";
  std::ifstream f(mpath);
  if (!f) throw IoError("cannot open: " + mpath);
  json manifest;
  try {
    f >> manifest;
  } catch (const json::parse_error& e) {
    throw IoError("bad manifest " + mpath + ": " + e.what());
  }
  CheckpointMeta meta;
  meta.config_hash = manifest.value("config_hash", "");
  meta.seed = manifest.value("seed", uint64_t{0});
  meta.iter = manifest.value("iter", uint64_t{0});
  const std::string dt = manifest.value("dtype", "single");
  meta.dtype = dt == "double" ? Dtype::Double : Dtype::Single;
  if (manifest.contains("model") && !manifest["model"].is_null())
    meta.model_json = manifest["model"].dump();
  if (manifest.contains("extra") && !manifest["extra"].is_null())
    meta.extra_json = manifest["extra"].dump();
  return meta;
}

template std::vector<RawTensor> to_raw<float>(const ParamStore<float>&);
template std::vector<RawTensor> to_raw<double>(const ParamStore<double>&);
template ParamStore<float> from_raw<float>(const std::vector<RawTensor>&);
template ParamStore<double> from_raw<double>(const std::vector<RawTensor>&);
template void save_checkpoint<float>(const std::string&, const ParamStore<float>&,
                                     const CheckpointMeta&);
template void save_checkpoint<double>(const std::string&, const ParamStore<double>&,
                                      const CheckpointMeta&);
template ParamStore<float> read_params<float>(const std::string&);
template ParamStore<double> read_params<double>(const std::string&);

}  // namespace pls
