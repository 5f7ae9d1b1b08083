#include "forgetlab/errors.hpp"
#include "forgetlab/trainer.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace forgetlab::trainer {

using json = nlohmann::ordered_json;
using numerics::Array;
using numerics::Rng;

namespace {

constexpr char kMagic[8] = {'F', 'G', 'L', 'B', 'C', 'K', 'P', 'T'};
constexpr char kTrailer[8] = {'F', 'G', 'L', 'B', 'E', 'N', 'D', '\0'};

void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_array(std::string& out, const Array& a) {
  for (double x : a.values()) put_u64(out, std::bit_cast<std::uint64_t>(x));
}

json rng_to_json(const Rng& r) { return json::array({r.key(), r.counter()}); }

Rng rng_from_json(const json& j) { return Rng(j.at(0).get<std::uint64_t>(), j.at(1).get<std::uint64_t>()); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError("checkpoint truncated: " + std::string(what) + " needs " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_) + ", file has " +
                            std::to_string(bytes_.size()));
    }
  }

  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return x;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return x;
  }

  Array array(Array::Shape shape, const std::string& name) {
    Array a = Array::uninitialized(std::move(shape));
    need(8 * a.size(), name.c_str());
    for (double& x : a.values()) x = std::bit_cast<double>(u64(name.c_str()));
    return a;
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  const std::vector<std::string> names = ck.params.names();
  std::vector<const Array*> params;
  ck.params.for_each([&](const Array& a) { params.push_back(&a); });
  if (ck.opt.m.size() != params.size() || ck.opt.v.size() != params.size()) {
    throw ContractError("optimizer state does not match the parameter groups");
  }

  json arrays = json::array();
  auto declare = [&](const std::string& name, const Array& a) {
    arrays.push_back({{"name", name}, {"shape", a.shape()}});
  };
  for (std::size_t i = 0; i < params.size(); ++i) declare(names[i], *params[i]);
  for (std::size_t i = 0; i < params.size(); ++i) declare("adam.m." + names[i], ck.opt.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) declare("adam.v." + names[i], ck.opt.v[i]);
  const Array scalars = Array::vector({ck.loss_sum, ck.last_train_loss});
  declare("loss_state", scalars);

  json header;
  header["config"] = config_to_json(ck.config);
  header["step"] = ck.step;
  header["opt_t"] = ck.opt.t;
  header["train_rng"] = rng_to_json(ck.train_rng);
  header["reset_rng"] = rng_to_json(ck.reset_rng);
  header["loss_count"] = ck.loss_count;
  header["registry"] = {{"size", ck.registry.size()}, {"digest", ck.registry.digest()}};
  header["arrays"] = std::move(arrays);
  const std::string head = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u32(out, Checkpoint::kVersion);
  put_u64(out, head.size());
  out += head;
  for (const Array* a : params) put_array(out, *a);
  for (const Array& a : ck.opt.m) put_array(out, a);
  for (const Array& a : ck.opt.v) put_array(out, a);
  put_array(out, scalars);
  for (std::uint64_t k : ck.registry.sorted_keys()) put_u64(out, k);
  out.append(kTrailer, sizeof kTrailer);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.raw(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = in.u32("version");
  if (version != Checkpoint::kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (this build reads version " +
                          std::to_string(Checkpoint::kVersion) + ")");
  }
  const std::uint64_t head_len = in.u64("header length");
  in.need(head_len, "header");
  json header;
  try {
    header = json::parse(in.raw(head_len, "header"));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  std::uint64_t registry_size = 0, registry_digest = 0;
  std::vector<std::pair<std::string, Array::Shape>> decl;
  try {
    ck.config = config_from_json(header.at("config"));
    ck.step = header.at("step").get<std::uint64_t>();
    ck.opt.t = header.at("opt_t").get<std::uint64_t>();
    ck.train_rng = rng_from_json(header.at("train_rng"));
    ck.reset_rng = rng_from_json(header.at("reset_rng"));
    ck.loss_count = header.at("loss_count").get<std::uint64_t>();
    registry_size = header.at("registry").at("size").get<std::uint64_t>();
    registry_digest = header.at("registry").at("digest").get<std::uint64_t>();
    for (const auto& a : header.at("arrays")) {
      decl.emplace_back(a.at("name").get<std::string>(), a.at("shape").get<Array::Shape>());
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }

  ck.params.layers.resize(ck.config.model.n_layers);
  const std::vector<std::string> names = ck.params.names();
  const std::size_t groups = names.size();
  if (decl.size() != 3 * groups + 1) {
    throw CheckpointError("checkpoint declares " + std::to_string(decl.size()) + " arrays, expected " +
                          std::to_string(3 * groups + 1));
  }
  auto expect = [&](std::size_t i, const std::string& name) {
    if (decl[i].first != name) {
      throw CheckpointError("checkpoint array " + std::to_string(i) + " is \"" + decl[i].first + "\", expected \"" +
                            name + "\"");
    }
    return in.array(decl[i].second, name);
  };

  std::size_t i = 0;
  ck.params.for_each([&](Array& a) {
    a = expect(i, names[i]);
    ++i;
  });
  for (std::size_t g = 0; g < groups; ++g) ck.opt.m.push_back(expect(groups + g, "adam.m." + names[g]));
  for (std::size_t g = 0; g < groups; ++g) ck.opt.v.push_back(expect(2 * groups + g, "adam.v." + names[g]));
  const Array scalars = expect(3 * groups, "loss_state");
  if (scalars.size() != 2) throw CheckpointError("loss_state must hold two values");
  ck.loss_sum = scalars[0];
  ck.last_train_loss = scalars[1];

  in.need(8 * registry_size, "registry");
  for (std::uint64_t r = 0; r < registry_size; ++r) ck.registry.insert_key(in.u64("registry"));
  if (ck.registry.size() != registry_size || ck.registry.digest() != registry_digest) {
    throw CheckpointError("checkpoint registry does not match its recorded digest");
  }

  if (in.remaining() < sizeof kTrailer) {
    throw CheckpointError("checkpoint truncated: missing end marker (" + std::to_string(in.remaining()) +
                          " of 8 bytes present)");
  }
  if (in.raw(sizeof kTrailer, "trailer") != std::string(kTrailer, sizeof kTrailer) || in.remaining() != 0) {
    throw CheckpointError("checkpoint truncated or corrupted: end marker damaged or trailing bytes present");
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace forgetlab::trainer
