#include "ambient/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <string_view>

#include "ambient/csv.hpp"
#include "ambient/errors.hpp"

namespace ambient {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'A', 'M', 'B', 'P'};
constexpr std::uint8_t kDtypeF32 = 0;

template <class T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at offset " + std::to_string(pos_) + " while reading " + what,
                        static_cast<std::int64_t>(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

bool is_running_stat(const ParamKey& key) {
  return key.tensor.ends_with(".running_mean") || key.tensor.ends_with(".running_var");
}

}  // namespace

std::string serialize_checkpoint(const ParamStore& params, std::uint64_t step) {
  std::string out(kMagic, 4);
  put<std::uint16_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, params.config_hash());
  put<std::uint64_t>(out, params.root_seed());
  put<std::uint64_t>(out, step);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [key, entry] : params.entries()) {
    const std::string name = key.name();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, kDtypeF32);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(entry.value.shape().size()));
    for (std::size_t d : entry.value.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : entry.value.values()) put<float>(out, static_cast<float>(v));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(entry.init.kind));
    put<double>(out, entry.init.param_a);
    put<double>(out, entry.init.param_b);
    put<std::uint64_t>(out, entry.init.root_seed);
    put<std::uint64_t>(out, entry.init.key_hash);
  }
  return out;
}

void save_checkpoint(const ParamStore& params, std::uint64_t step, const std::filesystem::path& path) {
  write_text_file(path, serialize_checkpoint(params, step));
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::optional<ModelConfig>& expected) {
  Reader in(bytes);
  if (in.take(4, "magic") != std::string_view(kMagic, 4)) throw FormatError("not a checkpoint: bad magic", 0);
  const std::size_t version_at = in.offset();
  const auto version = in.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                          std::to_string(kCheckpointVersion) + ")",
                      static_cast<std::int64_t>(version_at));
  }
  const auto config_hash = in.get<std::uint64_t>("config hash");
  const auto root_seed = in.get<std::uint64_t>("root seed");
  const auto step = in.get<std::uint64_t>("step");
  if (expected && expected->hash() != config_hash) {
    throw ConfigError("checkpoint was written for a different model config (hash mismatch)");
  }
  Checkpoint ck{expected ? ParamStore(*expected, root_seed) : ParamStore::detached(config_hash, root_seed), step};
  const auto count = in.get<std::uint32_t>("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = in.get<std::uint32_t>("name length");
    const std::size_t name_at = in.offset();
    ParamKey key;
    try {
      key = ParamKey::parse(in.take(name_len, "tensor name"));
    } catch (const Error& e) {
      throw FormatError(std::string("bad tensor name: ") + e.what(), static_cast<std::int64_t>(name_at));
    }
    const std::size_t dtype_at = in.offset();
    if (in.get<std::uint8_t>("dtype") != kDtypeF32) {
      throw FormatError("unknown dtype for '" + key.name() + "'", static_cast<std::int64_t>(dtype_at));
    }
    const auto rank = in.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint32_t>("dims");
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = static_cast<double>(in.get<float>("payload"));
    InitSpec init;
    const std::size_t kind_at = in.offset();
    const auto kind = in.get<std::uint8_t>("init kind");
    if (kind > static_cast<std::uint8_t>(InitKind::constant)) {
      throw FormatError("unknown init kind " + std::to_string(kind), static_cast<std::int64_t>(kind_at));
    }
    init.kind = static_cast<InitKind>(kind);
    init.param_a = in.get<double>("init parameter a");
    init.param_b = in.get<double>("init parameter b");
    init.root_seed = in.get<std::uint64_t>("init root seed");
    init.key_hash = in.get<std::uint64_t>("init key hash");
    const bool trainable = !is_running_stat(key);
    ck.params.insert(std::move(key), ParamEntry{Tensor(std::move(shape), std::move(data)), init, trainable});
  }
  if (!in.at_end()) {
    throw FormatError("trailing bytes after checkpoint at offset " + std::to_string(in.offset()),
                      static_cast<std::int64_t>(in.offset()));
  }
  if (expected) {
    const auto layout = model_layout(*expected);
    bool ok = layout.size() == ck.params.size();
    for (const TensorLayout& t : layout) ok = ok && ck.params.contains(t.key) && ck.params.tensor(t.key).shape() == t.shape;
    if (!ok) throw ConfigError("checkpoint tensors do not match the model config layout");
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  return parse_checkpoint(read_text_file(path), expected);
}

ParamStore round_to_f32(const ParamStore& params) {
  ParamStore out = params;
  for (auto& [key, entry] : out.entries())
    for (double& v : entry.value.data()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

}  // namespace ambient
