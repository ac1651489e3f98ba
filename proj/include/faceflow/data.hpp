#pragma once

#include <map>
#include <string>
#include <vector>

#include "faceflow/dense.hpp"
#include "faceflow/dsp.hpp"
#include "faceflow/model.hpp"
#include "faceflow/rng.hpp"

namespace faceflow {

inline constexpr int kFacialDim = 56;   // 50 expression + 3 neck + 3 jaw
inline constexpr int kAcousticDim = 30; // 26 cepstral/energy + 4 prosodic
inline constexpr int kVideoFps = 25;
inline constexpr int kEnergyChannel = 28;  // prosodic energy row

std::vector<std::string> facial_columns();
std::vector<std::string> acoustic_columns();

// Text feature tables: header row of column names, one tab-separated row per
// frame, locale-independent decimals.
void write_feature_file(const std::string& path,
                        const std::vector<std::string>& columns,
                        const MatXd& track);
struct FeatureFile {
  std::vector<std::string> columns;
  MatXd track;  // columns-of-file x frames
};
FeatureFile read_feature_file(const std::string& path);
MatXd load_facial_track(const std::string& path);
MatXd load_acoustic_track(const std::string& path);

AudioSignal read_wav_mono16(const std::string& path);
void write_wav_mono16(const std::string& path, const AudioSignal& audio);

// A time-aligned dyadic session: facial and acoustic tracks for both parties
// at 25 fps, all of equal frame count.
struct SessionData {
  std::string id;
  MatXd face_a, acoustic_a;
  MatXd face_b, acoustic_b;
  std::map<std::string, double> planted;  // synthetic-generator parameters

  Eigen::Index length() const { return face_a.cols(); }
  void check() const;
};

// Manifest: one structured text file naming the per-party feature files of
// each session (paths relative to the manifest) plus fps and any planted
// parameters.
void save_sessions(const std::string& dir, const std::string& manifest_name,
                   const std::vector<SessionData>& sessions);
std::vector<SessionData> load_sessions(const std::string& manifest_path);

struct SyntheticConfig {
  int n_sessions = 30;
  int session_len = 2400;      // frames at 25 fps
  double mimic_gain = 0.8;     // alpha
  int lag = 5;                 // frames
  double noise = 0.1;          // sigma_n
  double speech_coupling = 0;  // gamma
};

// Dyadic sessions with a planted dependency: party a's face follows party
// b's face at a fixed lag (plus optionally its own lagged speech energy),
// with additive Gaussian noise. Party b's tracks are independent smooth and
// bursty random processes.
std::vector<SessionData> generate_synthetic_corpus(const SyntheticConfig& cfg,
                                                   Rng& rng);

struct Segment {
  int session = 0;
  Eigen::Index start = 0;
  Eigen::Index len = 0;
};

struct DatasetSplit {
  std::vector<Segment> train, val, test;
  int holdout_session = -1;
};

// Holds one full session out, cuts the rest into fixed one-minute segments
// and assigns them at the 83/10/rest proportions; deterministic given the
// rng state.
DatasetSplit split_dataset(const std::vector<SessionData>& sessions, Rng& rng,
                           int segment_len = 60 * kVideoFps);

struct TrainWindow {
  int session = 0;
  Eigen::Index start = 0;
  bool avatar_is_b = false;
};

// Deterministic strided windowing over segments; both parties take a turn as
// avatar. Segments shorter than `length` yield nothing (warned on stderr).
std::vector<TrainWindow> window_segments(const std::vector<Segment>& segments,
                                         const std::vector<SessionData>& sessions,
                                         int length = 80, int stride = 40);

SequenceExample<double> materialize_window(const std::vector<SessionData>& sessions,
                                           const TrainWindow& w, int length);

}  // namespace faceflow
