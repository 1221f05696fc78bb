#include "cvt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "cvt/config_json.hpp"

CVT_BEGIN_NAMESPACE

namespace {

constexpr char kMagic[4] = {'C', 'V', 'T', 'K'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str32(const std::string& s) {
    le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, std::size_t end) : data_(data), end_(end) {}

  void need(std::size_t n, const char* what) const {
    if (n > end_ - pos_) {
      throw CheckpointTruncatedError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const std::string& name, const Tensor& t) {
  w.str32(name);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.le<std::uint64_t>(static_cast<std::uint64_t>(d));
  for (Real v : t.data()) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> serialize_checkpoint(const CvtModel& model, const std::string& metadata_json) {
  nlohmann::json header;
  header["model"] = nlohmann::json::parse(model_config_to_json(model.config()));
  try {
    header["meta"] = nlohmann::json::parse(metadata_json);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const std::string text = header.dump();

  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint64_t>(text.size());
  w.bytes(text.data(), text.size());
  auto params = model.parameters();
  auto buffers = model.buffers();
  w.le<std::uint64_t>(params.size() + buffers.size());
  for (const auto& p : params) write_tensor(w, p.name, p.tensor);
  for (const auto& b : buffers) write_tensor(w, b.name, b.tensor);
  w.le<std::uint64_t>(fnv1a64(w.out));
  return std::move(w.out);
}

void save_checkpoint(const CvtModel& model, const std::filesystem::path& path, const std::string& metadata_json) {
  auto bytes = serialize_checkpoint(model, metadata_json);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

LoadedCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const ModelConfig* expected) {
  if (bytes.size() < 4 + 4 + 8) throw CheckpointTruncatedError("checkpoint truncated: header incomplete");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointFormatError("not a checkpoint: bad magic");
  // The last 8 bytes hold the checksum; structure is parsed before them.
  Reader r(bytes, bytes.size() - 8);
  r.take(4, "magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  }
  const auto text_len = r.le<std::uint64_t>("config length");
  const std::string text = r.str(text_len, "config");
  const auto count = r.le<std::uint64_t>("record count");

  struct Record {
    Shape shape;
    std::span<const std::uint8_t> payload;
  };
  std::map<std::string, Record> records;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>("record name length");
    std::string name = r.str(name_len, "record name");
    const auto rank = r.le<std::uint32_t>("record rank");
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      auto ext = r.le<std::uint64_t>("record dims");
      shape.push_back(static_cast<std::int64_t>(ext));
      n *= ext;
    }
    if (n > bytes.size()) throw CheckpointTruncatedError("checkpoint truncated in record '" + name + "'");
    auto payload = r.take(static_cast<std::size_t>(n * 4), "record payload");
    records[name] = {std::move(shape), payload};
  }
  if (r.pos() != bytes.size() - 8) {
    throw CheckpointFormatError("checkpoint has " + std::to_string(bytes.size() - 8 - r.pos()) +
                                " unexpected trailing bytes");
  }

  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
  const std::uint64_t actual = fnv1a64(bytes.first(bytes.size() - 8));
  if (stored != actual) throw CheckpointChecksumError("checkpoint checksum mismatch");

  nlohmann::json header;
  ModelConfig config;
  try {
    header = nlohmann::json::parse(text);
    config = model_config_from_json(header.at("model").dump());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(std::string("checkpoint config unreadable: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointFormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  if (expected && !(*expected == config)) {
    throw CheckpointConfigMismatch("checkpoint holds model '" + config.name +
                                   "' whose config differs from the expected '" + expected->name + "'");
  }

  CvtModel model(config, 0);
  auto assign = [&](ParamList list) {
    for (auto& p : list) {
      auto it = records.find(p.name);
      if (it == records.end()) throw CheckpointFormatError("checkpoint lacks tensor '" + p.name + "'");
      if (it->second.shape != p.tensor.shape()) {
        throw CheckpointFormatError("tensor '" + p.name + "' has shape " + shape_str(it->second.shape) +
                                    ", model expects " + shape_str(p.tensor.shape()));
      }
      auto dst = p.tensor.mutable_data();
      const auto* src = it->second.payload.data();
      for (std::size_t i = 0; i < dst.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(src[4 * i + b]) << (8 * b);
        dst[i] = static_cast<Real>(std::bit_cast<float>(u));
      }
      records.erase(it);
    }
  };
  assign(model.parameters());
  assign(model.buffers());
  if (!records.empty()) {
    throw CheckpointFormatError("checkpoint has unknown tensor '" + records.begin()->first + "'");
  }
  std::string meta = header.contains("meta") ? header["meta"].dump() : "null";
  return {std::move(model), std::move(meta), stored};
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointFormatError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, expected);
}

CVT_END_NAMESPACE
