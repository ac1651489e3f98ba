#include "faceflow/data.hpp"

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "faceflow/config.hpp"

namespace faceflow {

namespace fs = std::filesystem;

std::vector<std::string> facial_columns() {
  std::vector<std::string> cols;
  char buf[16];
  for (int i = 0; i < 50; ++i) {
    std::snprintf(buf, sizeof(buf), "exp%02d", i);
    cols.push_back(buf);
  }
  for (const char* s : {"neck_x", "neck_y", "neck_z", "jaw_x", "jaw_y", "jaw_z"})
    cols.push_back(s);
  return cols;
}

std::vector<std::string> acoustic_columns() {
  std::vector<std::string> cols;
  char buf[16];
  for (int i = 1; i <= 25; ++i) {
    std::snprintf(buf, sizeof(buf), "mfcc%02d", i);
    cols.push_back(buf);
  }
  for (const char* s :
       {"log_energy", "pitch", "pitch_delta", "energy", "energy_delta"})
    cols.push_back(s);
  return cols;
}

void write_feature_file(const std::string& path,
                        const std::vector<std::string>& columns,
                        const MatXd& track) {
  if (static_cast<Eigen::Index>(columns.size()) != track.rows())
    throw std::invalid_argument("feature file: column count mismatch");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write feature file: " + path);
  for (size_t i = 0; i < columns.size(); ++i)
    f << (i ? "\t" : "") << columns[i];
  f << "\n";
  for (Eigen::Index t = 0; t < track.cols(); ++t) {
    for (Eigen::Index r = 0; r < track.rows(); ++r)
      f << (r ? "\t" : "") << format_double(track(r, t));
    f << "\n";
  }
}

static std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t' || c == ' ') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

FeatureFile read_feature_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open feature file: " + path);
  std::string line;
  if (!std::getline(f, line))
    throw std::runtime_error("feature file is empty: " + path);
  FeatureFile out;
  out.columns = split_fields(line);
  const Eigen::Index dim = static_cast<Eigen::Index>(out.columns.size());
  if (dim == 0) throw std::runtime_error("feature file has no columns: " + path);

  std::vector<double> values;
  Eigen::Index frames = 0;
  while (std::getline(f, line)) {
    auto fields = split_fields(line);
    if (fields.empty()) continue;
    if (static_cast<Eigen::Index>(fields.size()) != dim)
      throw std::runtime_error("feature file row " + std::to_string(frames + 1) +
                               " has wrong field count: " + path);
    for (const auto& s : fields) values.push_back(parse_double(s));
    ++frames;
  }
  out.track.resize(dim, frames);
  for (Eigen::Index t = 0; t < frames; ++t)
    for (Eigen::Index r = 0; r < dim; ++r)
      out.track(r, t) = values[static_cast<size_t>(t) * dim + r];
  return out;
}

MatXd load_facial_track(const std::string& path) {
  FeatureFile f = read_feature_file(path);
  if (f.track.rows() != kFacialDim)
    throw std::runtime_error("facial track must have 56 channels: " + path);
  return f.track;
}

MatXd load_acoustic_track(const std::string& path) {
  FeatureFile f = read_feature_file(path);
  if (f.track.rows() != kAcousticDim)
    throw std::runtime_error("acoustic track must have 30 channels: " + path);
  return f.track;
}

// ---------------------------------------------------------------------------
// 16-bit PCM mono wav

namespace {
std::uint32_t read_u32(std::istream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t(b[3]) << 24);
}
std::uint16_t read_u16(std::istream& f) {
  unsigned char b[2];
  f.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}
void write_u32(std::ostream& f, std::uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
               char((v >> 24) & 0xff)};
  f.write(b, 4);
}
void write_u16(std::ostream& f, std::uint16_t v) {
  char b[2] = {char(v & 0xff), char((v >> 8) & 0xff)};
  f.write(b, 2);
}
}  // namespace

AudioSignal read_wav_mono16(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open wav: " + path);
  char tag[5] = {0};
  f.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0)
    throw std::runtime_error("not a RIFF wav file: " + path);
  read_u32(f);
  f.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0)
    throw std::runtime_error("not a WAVE file: " + path);

  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  AudioSignal audio;
  while (f.read(tag, 4)) {
    std::uint32_t size = read_u32(f);
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      std::uint16_t fmt = read_u16(f);
      channels = read_u16(f);
      rate = read_u32(f);
      read_u32(f);
      read_u16(f);
      bits = read_u16(f);
      if (size > 16) f.seekg(size - 16, std::ios::cur);
      if (fmt != 1) throw std::runtime_error("wav: only PCM supported: " + path);
    } else if (std::strncmp(tag, "data", 4) == 0) {
      if (channels != 1 || bits != 16)
        throw std::runtime_error("wav: expected 16-bit mono PCM: " + path);
      const std::uint32_t n = size / 2;
      audio.samples.resize(n);
      for (std::uint32_t i = 0; i < n; ++i) {
        std::int16_t s = static_cast<std::int16_t>(read_u16(f));
        audio.samples[i] = s / 32768.0;
      }
      audio.sample_rate = rate;
      return audio;
    } else {
      f.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw std::runtime_error("wav: no data chunk: " + path);
}

void write_wav_mono16(const std::string& path, const AudioSignal& audio) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write wav: " + path);
  const std::uint32_t n = static_cast<std::uint32_t>(audio.samples.size());
  const std::uint32_t rate = static_cast<std::uint32_t>(audio.sample_rate);
  f.write("RIFF", 4);
  write_u32(f, 36 + 2 * n);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  write_u32(f, 16);
  write_u16(f, 1);
  write_u16(f, 1);
  write_u32(f, rate);
  write_u32(f, rate * 2);
  write_u16(f, 2);
  write_u16(f, 16);
  f.write("data", 4);
  write_u32(f, 2 * n);
  for (std::uint32_t i = 0; i < n; ++i) {
    double v = std::max(-1.0, std::min(1.0, audio.samples[i]));
    write_u16(f, static_cast<std::uint16_t>(
                     static_cast<std::int16_t>(std::lround(v * 32767.0))));
  }
}

// ---------------------------------------------------------------------------
// Sessions and manifests

void SessionData::check() const {
  const Eigen::Index t = face_a.cols();
  if (acoustic_a.cols() != t || face_b.cols() != t || acoustic_b.cols() != t)
    throw std::runtime_error("session " + id + ": track lengths differ");
  if (face_a.rows() != kFacialDim || face_b.rows() != kFacialDim)
    throw std::runtime_error("session " + id + ": facial dim != 56");
  if (acoustic_a.rows() != kAcousticDim || acoustic_b.rows() != kAcousticDim)
    throw std::runtime_error("session " + id + ": acoustic dim != 30");
}

void save_sessions(const std::string& dir, const std::string& manifest_name,
                   const std::vector<SessionData>& sessions) {
  fs::create_directories(dir);
  std::ofstream m(fs::path(dir) / manifest_name);
  if (!m) throw std::runtime_error("cannot write manifest in " + dir);
  m << "# faceflow session manifest\n";
  m << "fps " << kVideoFps << "\n";
  for (const auto& s : sessions) {
    s.check();
    const std::string base = s.id;
    const std::string fa = base + "_a_face.tsv";
    const std::string aa = base + "_a_acoustic.tsv";
    const std::string fb = base + "_b_face.tsv";
    const std::string ab = base + "_b_acoustic.tsv";
    write_feature_file((fs::path(dir) / fa).string(), facial_columns(), s.face_a);
    write_feature_file((fs::path(dir) / aa).string(), acoustic_columns(),
                       s.acoustic_a);
    write_feature_file((fs::path(dir) / fb).string(), facial_columns(), s.face_b);
    write_feature_file((fs::path(dir) / ab).string(), acoustic_columns(),
                       s.acoustic_b);
    m << "session " << s.id << "\n";
    m << "face_a " << fa << "\n";
    m << "acoustic_a " << aa << "\n";
    m << "face_b " << fb << "\n";
    m << "acoustic_b " << ab << "\n";
    for (const auto& [key, value] : s.planted)
      m << "planted." << key << " " << format_double(value) << "\n";
  }
}

std::vector<SessionData> load_sessions(const std::string& manifest_path) {
  std::ifstream m(manifest_path);
  if (!m) throw std::runtime_error("cannot open manifest: " + manifest_path);
  const fs::path dir = fs::path(manifest_path).parent_path();
  std::vector<SessionData> sessions;
  std::map<std::string, std::string> files;
  std::string line;
  auto flush = [&](SessionData& s) {
    if (s.id.empty()) return;
    auto need = [&](const char* key) {
      auto it = files.find(key);
      if (it == files.end())
        throw std::runtime_error("manifest: session " + s.id + " missing " + key);
      return (dir / it->second).string();
    };
    s.face_a = load_facial_track(need("face_a"));
    s.acoustic_a = load_acoustic_track(need("acoustic_a"));
    s.face_b = load_facial_track(need("face_b"));
    s.acoustic_b = load_acoustic_track(need("acoustic_b"));
    s.check();
    sessions.push_back(std::move(s));
    files.clear();
  };
  SessionData cur;
  while (std::getline(m, line)) {
    auto fields = split_fields(line);
    if (fields.empty() || fields[0][0] == '#') continue;
    if (fields.size() != 2)
      throw std::runtime_error("manifest: expected 'key value' lines");
    const std::string& key = fields[0];
    if (key == "fps") continue;
    if (key == "session") {
      flush(cur);
      cur = SessionData{};
      cur.id = fields[1];
    } else if (key.rfind("planted.", 0) == 0) {
      cur.planted[key.substr(8)] = parse_double(fields[1]);
    } else {
      files[key] = fields[1];
    }
  }
  flush(cur);
  if (sessions.empty())
    throw std::runtime_error("manifest lists no sessions: " + manifest_path);
  return sessions;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {
// Stationary AR(1) rows with unit marginal variance.
MatXd smooth_random_track(int channels, int len, double rho, Rng& rng) {
  MatXd x(channels, len);
  const double drive = std::sqrt(1.0 - rho * rho);
  for (int c = 0; c < channels; ++c) {
    x(c, 0) = rng.normal();
    for (int t = 1; t < len; ++t)
      x(c, t) = rho * x(c, t - 1) + drive * rng.normal();
  }
  return x;
}

// Speech-like track: AR(1) rows gated by an on/off burst envelope; the
// prosodic energy row follows the envelope directly.
MatXd burst_acoustic_track(int len, Rng& rng) {
  VecXd env(len);
  bool on = rng.uniform() < 0.5;
  for (int t = 0; t < len; ++t) {
    env[t] = on ? 1.0 : 0.05;
    const double flip_p = on ? 1.0 / 25.0 : 1.0 / 20.0;
    if (rng.uniform() < flip_p) on = !on;
  }
  MatXd x = smooth_random_track(kAcousticDim, len, 0.7, rng);
  x.array().rowwise() *= env.transpose().array();
  x.row(kEnergyChannel) =
      env.transpose() + 0.1 * x.row(kEnergyChannel);
  return x;
}
}  // namespace

std::vector<SessionData> generate_synthetic_corpus(const SyntheticConfig& cfg,
                                                   Rng& rng) {
  if (cfg.n_sessions < 1 || cfg.lag < 1 || cfg.session_len <= cfg.lag ||
      cfg.noise < 0)
    throw std::invalid_argument("synthetic corpus: invalid configuration");
  std::vector<SessionData> sessions;
  sessions.reserve(cfg.n_sessions);
  for (int s = 0; s < cfg.n_sessions; ++s) {
    SessionData sd;
    char id[16];
    std::snprintf(id, sizeof(id), "s%03d", s);
    sd.id = id;
    sd.face_b = smooth_random_track(kFacialDim, cfg.session_len, 0.92, rng);
    sd.acoustic_b = burst_acoustic_track(cfg.session_len, rng);
    sd.acoustic_a = burst_acoustic_track(cfg.session_len, rng);
    sd.face_a.resize(kFacialDim, cfg.session_len);
    for (int t = 0; t < cfg.session_len; ++t) {
      VecXd frame = VecXd::Zero(kFacialDim);
      const int src = t - cfg.lag;
      if (src >= 0) {
        frame = cfg.mimic_gain * sd.face_b.col(src);
        frame.array() +=
            cfg.speech_coupling * sd.acoustic_a(kEnergyChannel, src);
      }
      for (int c = 0; c < kFacialDim; ++c)
        frame[c] += cfg.noise * rng.normal();
      sd.face_a.col(t) = frame;
    }
    sd.planted["alpha"] = cfg.mimic_gain;
    sd.planted["lag"] = cfg.lag;
    sd.planted["noise"] = cfg.noise;
    sd.planted["speech_coupling"] = cfg.speech_coupling;
    sessions.push_back(std::move(sd));
  }
  return sessions;
}

// ---------------------------------------------------------------------------
// Splits and windows

DatasetSplit split_dataset(const std::vector<SessionData>& sessions, Rng& rng,
                           int segment_len) {
  if (sessions.size() < 2)
    throw std::invalid_argument(
        "split_dataset: need >= 2 sessions to hold one out and train");
  DatasetSplit split;
  split.holdout_session = static_cast<int>(rng.below(sessions.size()));

  std::vector<Segment> pool;
  for (int s = 0; s < static_cast<int>(sessions.size()); ++s) {
    if (s == split.holdout_session) continue;
    const Eigen::Index len = sessions[s].length();
    for (Eigen::Index start = 0; start + segment_len <= len;
         start += segment_len)
      pool.push_back({s, start, segment_len});
  }
  if (pool.empty())
    throw std::invalid_argument("split_dataset: no full segments available");

  for (size_t i = pool.size(); i > 1; --i)
    std::swap(pool[i - 1], pool[rng.below(i)]);

  const size_t n = pool.size();
  const size_t n_train = static_cast<size_t>(std::lround(0.83 * n));
  const size_t n_val =
      std::min(n - n_train, static_cast<size_t>(std::lround(0.10 * n)));
  split.train.assign(pool.begin(), pool.begin() + n_train);
  split.val.assign(pool.begin() + n_train, pool.begin() + n_train + n_val);
  split.test.assign(pool.begin() + n_train + n_val, pool.end());
  return split;
}

std::vector<TrainWindow> window_segments(const std::vector<Segment>& segments,
                                         const std::vector<SessionData>& sessions,
                                         int length, int stride) {
  std::vector<TrainWindow> windows;
  for (const auto& seg : segments) {
    if (seg.session < 0 || seg.session >= static_cast<int>(sessions.size()) ||
        seg.start + seg.len > sessions[seg.session].length())
      throw std::invalid_argument("window_segments: segment out of bounds");
    if (seg.len < length) {
      std::fprintf(stderr,
                   "warning: segment of %lld frames shorter than window %d, "
                   "skipped\n",
                   static_cast<long long>(seg.len), length);
      continue;
    }
    for (Eigen::Index off = 0; off + length <= seg.len; off += stride) {
      windows.push_back({seg.session, seg.start + off, false});
      windows.push_back({seg.session, seg.start + off, true});
    }
  }
  return windows;
}

SequenceExample<double> materialize_window(const std::vector<SessionData>& sessions,
                                           const TrainWindow& w, int length) {
  const SessionData& s = sessions.at(w.session);
  SequenceExample<double> e;
  if (!w.avatar_is_b) {
    e.f_a = s.face_a.middleCols(w.start, length);
    e.s_a = s.acoustic_a.middleCols(w.start, length);
    e.f_i = s.face_b.middleCols(w.start, length);
    e.s_i = s.acoustic_b.middleCols(w.start, length);
  } else {
    e.f_a = s.face_b.middleCols(w.start, length);
    e.s_a = s.acoustic_b.middleCols(w.start, length);
    e.f_i = s.face_a.middleCols(w.start, length);
    e.s_i = s.acoustic_a.middleCols(w.start, length);
  }
  return e;
}

}  // namespace faceflow
