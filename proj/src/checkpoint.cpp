#include "faceflow/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace faceflow {

namespace {
constexpr char kMagic[4] = {'F', 'F', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& f, std::uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
               char((v >> 24) & 0xff)};
  f.write(b, 4);
}

void put_u64(std::ostream& f, std::uint64_t v) {
  put_u32(f, static_cast<std::uint32_t>(v & 0xffffffffull));
  put_u32(f, static_cast<std::uint32_t>(v >> 32));
}

void put_bytes(std::ostream& f, const std::string& s) {
  put_u32(f, static_cast<std::uint32_t>(s.size()));
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_tensor(std::ostream& f, const TensorRef<double>& t) {
  put_bytes(f, t.name);
  put_u64(f, static_cast<std::uint64_t>(t.rows));
  put_u64(f, static_cast<std::uint64_t>(t.cols));
  // doubles written as little-endian IEEE-754 bit patterns
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &t.data[i], 8);
    put_u64(f, bits);
  }
}

void put_matrix(std::ostream& f, const std::string& name, const MatXd& m) {
  TensorRef<double> t{name, const_cast<double*>(m.data()), m.rows(), m.cols()};
  put_tensor(f, t);
}

struct Reader {
  std::istream& f;
  std::string where;

  void fail(const std::string& what) const {
    throw std::runtime_error("checkpoint " + where + ": " + what);
  }
  std::uint32_t u32() {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) fail("truncated file");
    return b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t(b[3]) << 24);
  }
  std::uint64_t u64() {
    std::uint64_t lo = u32();
    std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::string bytes() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    f.read(s.data(), n);
    if (!f) fail("truncated string block");
    return s;
  }
  void tensor_into(const TensorRef<double>& t) {
    std::string name = bytes();
    if (name != t.name) fail("tensor name mismatch: expected " + t.name +
                             ", found " + name);
    const auto rows = static_cast<Eigen::Index>(u64());
    const auto cols = static_cast<Eigen::Index>(u64());
    if (rows != t.rows || cols != t.cols)
      fail("tensor shape mismatch in " + t.name);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      std::uint64_t bits = u64();
      std::memcpy(&t.data[i], &bits, 8);
    }
  }
  void matrix_into(const std::string& name, MatXd& m) {
    TensorRef<double> t{name, m.data(), m.rows(), m.cols()};
    tensor_into(t);
  }
  void vector_into(const std::string& name, VecXd& v) {
    TensorRef<double> t{name, v.data(), v.rows(), 1};
    tensor_into(t);
  }
};

std::string config_text(const DyadFlowModel<double>& model,
                        const TrainConfig& train_cfg) {
  ConfigMap c;
  model_config_into(model.cfg, c);
  train_config_into(train_cfg, c);
  return c.serialize();
}
}  // namespace

void save_checkpoint(const std::string& path, DyadFlowModel<double>& model,
                     const TrainConfig& train_cfg, const TrainerState& state) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  const std::string cfg_text = config_text(model, train_cfg);
  f.write(kMagic, 4);
  put_u32(f, kVersion);
  put_u64(f, fnv1a64(cfg_text));
  put_bytes(f, cfg_text);

  put_u64(f, static_cast<std::uint64_t>(state.global_step));
  put_u32(f, static_cast<std::uint32_t>(state.epoch));
  put_u32(f, static_cast<std::uint32_t>(state.step_in_epoch));

  put_u32(f, static_cast<std::uint32_t>(model.flow.steps.size()));
  for (const auto& s : model.flow.steps)
    put_u32(f, s.actnorm.initialized ? 1 : 0);
  // fixed (untrained) structure of the linear maps
  for (const auto& s : model.flow.steps) {
    for (Eigen::Index i = 0; i < s.linear.perm.size(); ++i)
      put_u32(f, static_cast<std::uint32_t>(s.linear.perm[i]));
    put_matrix(f, "sign_diag", s.linear.sign_diag);
  }

  TensorRefs<double> refs = collect_tensors(model);
  put_u32(f, static_cast<std::uint32_t>(refs.size()));
  for (const auto& r : refs) put_tensor(f, r);

  const bool has_adam = !state.adam.m.empty();
  put_u32(f, has_adam ? 1 : 0);
  if (has_adam) {
    if (state.adam.m.size() != refs.size())
      throw std::runtime_error("checkpoint: optimizer/parameter mismatch");
    put_u64(f, static_cast<std::uint64_t>(state.adam.step));
    for (size_t i = 0; i < refs.size(); ++i) {
      put_matrix(f, refs[i].name + ".adam_m", state.adam.m[i]);
      put_matrix(f, refs[i].name + ".adam_v", state.adam.v[i]);
    }
  }
  put_bytes(f, state.rng.serialize());
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  Reader r{f, path};

  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    r.fail("bad magic bytes (not a checkpoint)");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    r.fail("unsupported format version " + std::to_string(version));
  const std::uint64_t digest = r.u64();
  const std::string cfg_text = r.bytes();
  if (digest != fnv1a64(cfg_text)) r.fail("config digest mismatch");

  ConfigMap cfg = ConfigMap::parse(cfg_text);
  Checkpoint ck;
  ck.train_cfg = train_config_from(cfg);
  ModelConfig mc = model_config_from(cfg);
  Rng scratch(0);
  ck.model = make_model<double>(mc, scratch);

  ck.state.global_step = static_cast<long long>(r.u64());
  ck.state.epoch = static_cast<int>(r.u32());
  ck.state.step_in_epoch = static_cast<int>(r.u32());

  const std::uint32_t n_steps = r.u32();
  if (n_steps != ck.model.flow.steps.size()) r.fail("flow step count mismatch");
  for (auto& s : ck.model.flow.steps) s.actnorm.initialized = r.u32() != 0;
  for (auto& s : ck.model.flow.steps) {
    for (Eigen::Index i = 0; i < s.linear.perm.size(); ++i)
      s.linear.perm[i] = static_cast<int>(r.u32());
    r.vector_into("sign_diag", s.linear.sign_diag);
  }

  TensorRefs<double> refs = collect_tensors(ck.model);
  const std::uint32_t n_tensors = r.u32();
  if (n_tensors != refs.size()) r.fail("tensor count mismatch");
  for (auto& ref : refs) r.tensor_into(ref);

  const std::uint32_t has_adam = r.u32();
  if (has_adam) {
    ck.state.adam = AdamState::init(refs, ck.train_cfg.beta1,
                                    ck.train_cfg.beta2, ck.train_cfg.epsilon);
    ck.state.adam.step = static_cast<long long>(r.u64());
    for (size_t i = 0; i < refs.size(); ++i) {
      r.matrix_into(refs[i].name + ".adam_m", ck.state.adam.m[i]);
      r.matrix_into(refs[i].name + ".adam_v", ck.state.adam.v[i]);
    }
  }
  ck.state.rng.deserialize(r.bytes());
  return ck;
}

std::uint64_t checkpoint_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return fnv1a64(os.str());
}

}  // namespace faceflow
