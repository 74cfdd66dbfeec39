#include "roadnav/checkpoint.hpp"

#include <bit>
#include <cstring>

#include <nlohmann/json.hpp>

#include "roadnav/util.hpp"

namespace roadnav {

namespace {

constexpr char kMagic[8] = {'R', 'N', 'A', 'V', 'C', 'K', 'P', 'T'};
constexpr std::size_t kHashLen = 64;

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get_le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.class_names.size() != ckpt.params.config.n) {
    throw CheckpointError("checkpoint carries " + std::to_string(ckpt.class_names.size()) +
                          " class names for a model with n=" + std::to_string(ckpt.params.config.n));
  }
  const nlohmann::json header = {{"model", ckpt.params.config},
                                 {"classes", ckpt.class_names},
                                 {"orientation_flipped", ckpt.orientation_flipped}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  put_le<std::uint64_t>(out, ckpt.params.values.size());
  out.reserve(out.size() + 8 * ckpt.params.values.size() + kHashLen);
  for (double v : ckpt.params.values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  out += sha256_hex(out);
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic)) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const auto version = r.get_le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto text_len = r.get_le<std::uint64_t>();
  const auto text = r.take(text_len);
  const auto count = r.get_le<std::uint64_t>();
  if (count > (bytes.size() - r.pos()) / 8) throw CheckpointError("checkpoint truncated");
  const auto payload = r.take(8 * count);
  const auto body_len = r.pos();
  const auto stored_hash = r.take(kHashLen);
  if (r.pos() != bytes.size()) throw CheckpointError("trailing bytes after checkpoint hash");
  if (sha256_hex(bytes.substr(0, body_len)) != stored_hash) throw CheckpointError("checkpoint hash mismatch");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("invalid checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.params = ModelParameters(header.at("model").get<ModelConfig>());
  ckpt.class_names = header.at("classes").get<std::vector<std::string>>();
  ckpt.orientation_flipped = header.value("orientation_flipped", false);
  if (ckpt.params.values.size() != count) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " values, config expects " +
                          std::to_string(ckpt.params.values.size()));
  }
  if (ckpt.class_names.size() != ckpt.params.config.n) throw CheckpointError("class list does not match model n");
  Reader values(payload);
  for (auto& v : ckpt.params.values) v = std::bit_cast<double>(values.get_le<std::uint64_t>());
  return ckpt;
}

std::string checkpoint_hash(const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  return bytes.substr(bytes.size() - kHashLen);
}

std::string save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file(path.string(), bytes);
  return bytes.substr(bytes.size() - kHashLen);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(resolve_checkpoint_path(path).string()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ClassRegistry& registry) {
  auto ckpt = load_checkpoint(path);
  if (ckpt.params.config.n != registry.n_anatomy()) {
    throw CheckpointError("checkpoint was trained for n=" + std::to_string(ckpt.params.config.n) +
                          " anatomy classes but the registry has " + std::to_string(registry.n_anatomy()));
  }
  if (ckpt.class_names != registry.anatomy_names()) {
    throw CheckpointError("checkpoint class names do not match the registry");
  }
  return ckpt;
}

std::filesystem::path resolve_checkpoint_path(const std::filesystem::path& path) {
  if (std::filesystem::is_regular_file(path)) return path;
  auto with_ext = path;
  with_ext += ".ckpt";
  if (std::filesystem::is_regular_file(with_ext)) return with_ext;
  throw CheckpointError("checkpoint '" + path.string() + "' not found");
}

}  // namespace roadnav
