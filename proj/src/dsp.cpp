#include "faceflow/dsp.hpp"

#include <cmath>
#include <stdexcept>

namespace faceflow {

namespace {
constexpr double kPi = 3.14159265358979323846;

VecXd hamming_window(int n) {
  VecXd w(n);
  for (int i = 0; i < n; ++i)
    w[i] = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (n - 1));
  return w;
}

VecXd preemphasize(const VecXd& x, double coeff) {
  VecXd y(x.size());
  if (x.size() == 0) return y;
  y[0] = x[0];
  for (Eigen::Index i = 1; i < x.size(); ++i) y[i] = x[i] - coeff * x[i - 1];
  return y;
}

int frame_count(Eigen::Index n, int win, int hop) {
  if (n < win) return 0;
  return 1 + static_cast<int>((n - win) / hop);
}
}  // namespace

void fft_inplace(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0)
    throw std::invalid_argument("fft: size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

MatXd mel_filterbank(int num_filters, int nfft, double sample_rate) {
  const int bins = nfft / 2 + 1;
  const double mel_max = hz_to_mel(sample_rate / 2.0);
  VecXd mel_pts = VecXd::LinSpaced(num_filters + 2, 0.0, mel_max);
  VecXd bin_of(num_filters + 2);
  for (int i = 0; i < num_filters + 2; ++i)
    bin_of[i] = mel_to_hz(mel_pts[i]) * nfft / sample_rate;

  MatXd fb = MatXd::Zero(num_filters, bins);
  for (int f = 0; f < num_filters; ++f) {
    const double lo = bin_of[f], mid = bin_of[f + 1], hi = bin_of[f + 2];
    for (int b = 0; b < bins; ++b) {
      if (b > lo && b < mid)
        fb(f, b) = (b - lo) / (mid - lo);
      else if (b >= mid && b < hi)
        fb(f, b) = (hi - b) / (hi - mid);
    }
  }
  return fb;
}

namespace {
// DCT-II with orthonormal scaling, applied to one column.
VecXd dct_ii_ortho(const VecXd& x) {
  const int m = static_cast<int>(x.size());
  VecXd out(m);
  for (int k = 0; k < m; ++k) {
    double acc = 0;
    for (int n = 0; n < m; ++n)
      acc += x[n] * std::cos(kPi * k * (2 * n + 1) / (2.0 * m));
    out[k] = acc * (k == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m));
  }
  return out;
}

VecXd power_spectrum(const VecXd& frame) {
  std::vector<std::complex<double>> buf(kNfft, {0.0, 0.0});
  for (Eigen::Index i = 0; i < frame.size() && i < kNfft; ++i)
    buf[i] = {frame[i], 0.0};
  fft_inplace(buf);
  VecXd p(kNfft / 2 + 1);
  for (int b = 0; b <= kNfft / 2; ++b) p[b] = std::norm(buf[b]) / kNfft;
  return p;
}
}  // namespace

MatXd compute_mfcc_energy(const AudioSignal& audio) {
  if (audio.sample_rate < 8000.0)
    throw std::invalid_argument("mfcc: sample rate must be >= 8 kHz");
  const int win = static_cast<int>(std::lround(kFrameWindowSec * audio.sample_rate));
  const int hop = static_cast<int>(std::lround(kFrameHopSec * audio.sample_rate));
  const int frames = frame_count(audio.samples.size(), win, hop);
  MatXd out(kMfccDim, frames);
  if (frames == 0) return out;

  VecXd emph = preemphasize(audio.samples, kPreEmphasis);
  VecXd window = hamming_window(win);
  MatXd fb = mel_filterbank(kNumMelFilters, kNfft, audio.sample_rate);

  for (int t = 0; t < frames; ++t) {
    VecXd frame = emph.segment(static_cast<Eigen::Index>(t) * hop, win);
    const double energy = std::max(frame.squaredNorm(), kEnergyFloor);
    VecXd p = power_spectrum(frame.cwiseProduct(window));
    VecXd fbank = (fb * p).cwiseMax(kEnergyFloor).array().log();
    VecXd ceps = dct_ii_ortho(fbank);
    out.block(0, t, kNumCepstra, 1) = ceps.segment(1, kNumCepstra);
    out(kNumCepstra, t) = std::log(energy);
  }
  return out;
}

namespace {
// Normalized autocorrelation pitch over one analysis window; 0 if unvoiced.
double autocorr_pitch(const VecXd& seg, double sample_rate) {
  const int min_lag = static_cast<int>(sample_rate / 500.0);
  const int max_lag = static_cast<int>(sample_rate / 75.0);
  const Eigen::Index n = seg.size();
  if (n < 2 * min_lag + 1) return 0.0;
  const int hi = std::min<int>(max_lag, static_cast<int>(n) - 1);

  const double e0 = seg.squaredNorm();
  if (e0 < 1e-8) return 0.0;

  double best = 0.0;
  std::vector<double> scores(hi + 1, 0.0);
  for (int lag = min_lag; lag <= hi; ++lag) {
    const Eigen::Index m = n - lag;
    const double num = seg.head(m).dot(seg.tail(m));
    const double den =
        std::sqrt(seg.head(m).squaredNorm() * seg.tail(m).squaredNorm());
    const double r = den > 0 ? num / den : 0.0;
    scores[lag] = r;
    best = std::max(best, r);
  }
  if (best < 0.45) return 0.0;
  // smallest lag near the global peak, so period multiples cannot win
  int best_lag = 0;
  for (int lag = min_lag; lag <= hi; ++lag) {
    if (scores[lag] >= 0.9 * best &&
        (lag == min_lag || scores[lag] >= scores[lag - 1]) &&
        (lag == hi || scores[lag] >= scores[lag + 1])) {
      best_lag = lag;
      break;
    }
  }
  if (best_lag == 0) return 0.0;

  // parabolic refinement around the peak
  double lag = best_lag;
  if (best_lag > min_lag && best_lag < hi) {
    const double y0 = scores[best_lag - 1], y1 = scores[best_lag],
                 y2 = scores[best_lag + 1];
    const double denom = y0 - 2.0 * y1 + y2;
    if (std::abs(denom) > 1e-12) lag += 0.5 * (y0 - y2) / denom;
  }
  return sample_rate / lag;
}
}  // namespace

MatXd compute_prosody(const AudioSignal& audio) {
  if (audio.sample_rate < 8000.0)
    throw std::invalid_argument("prosody: sample rate must be >= 8 kHz");
  const int win = static_cast<int>(std::lround(kFrameWindowSec * audio.sample_rate));
  const int hop = static_cast<int>(std::lround(kFrameHopSec * audio.sample_rate));
  const int pitch_win = static_cast<int>(std::lround(0.04 * audio.sample_rate));
  const int frames = frame_count(audio.samples.size(), win, hop);
  MatXd out = MatXd::Zero(kProsodyDim, frames);
  if (frames == 0) return out;

  for (int t = 0; t < frames; ++t) {
    const Eigen::Index center = static_cast<Eigen::Index>(t) * hop + win / 2;
    const Eigen::Index lo = std::max<Eigen::Index>(0, center - pitch_win / 2);
    const Eigen::Index hi =
        std::min<Eigen::Index>(audio.samples.size(), center + pitch_win / 2);
    out(0, t) = autocorr_pitch(audio.samples.segment(lo, hi - lo),
                               audio.sample_rate);
    VecXd frame = audio.samples.segment(static_cast<Eigen::Index>(t) * hop, win);
    out(2, t) = std::log(std::max(frame.squaredNorm(), kEnergyFloor));
  }
  for (int t = 1; t + 1 < frames; ++t) {
    out(1, t) = 0.5 * (out(0, t + 1) - out(0, t - 1));
    out(3, t) = 0.5 * (out(2, t + 1) - out(2, t - 1));
  }
  return out;
}

MatXd assemble_acoustic(const MatXd& mfcc_energy, const MatXd& prosody) {
  if (mfcc_energy.cols() != prosody.cols())
    throw std::invalid_argument("assemble_acoustic: frame counts differ");
  const Eigen::Index n100 = mfcc_energy.cols();
  const Eigen::Index n25 = n100 / 4;
  MatXd out(mfcc_energy.rows() + prosody.rows(), n25);
  for (Eigen::Index k = 0; k < n25; ++k) {
    out.block(0, k, mfcc_energy.rows(), 1) =
        mfcc_energy.middleCols(4 * k, 4).rowwise().mean();
    out.block(mfcc_energy.rows(), k, prosody.rows(), 1) =
        prosody.middleCols(4 * k, 4).rowwise().mean();
  }
  return out;
}

MatXd savgol_coefficients(int window, int order) {
  if (window < order + 1 || window % 2 == 0)
    throw std::invalid_argument("savgol: window must be odd and > order");
  const int half = window / 2;
  MatXd design(window, order + 1);
  for (int i = 0; i < window; ++i) {
    double p = 1.0;
    for (int j = 0; j <= order; ++j) {
      design(i, j) = p;
      p *= (i - half);
    }
  }
  // projection onto the fit evaluated at every window position
  MatXd pinv =
      (design.transpose() * design).ldlt().solve(design.transpose());
  return design * pinv;  // window x window; row e evaluates at position e
}

MatXd savgol_smooth(const MatXd& track, int window, int order) {
  const Eigen::Index t_len = track.cols();
  if (t_len < window) return track;
  const int half = window / 2;
  MatXd coef = savgol_coefficients(window, order);
  MatXd out(track.rows(), t_len);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    Eigen::Index start = t - half;
    int eval_pos = half;
    if (start < 0) {
      eval_pos = static_cast<int>(t);
      start = 0;
    } else if (start + window > t_len) {
      eval_pos = static_cast<int>(t - (t_len - window));
      start = t_len - window;
    }
    out.col(t) = track.middleCols(start, window) * coef.row(eval_pos).transpose();
  }
  return out;
}

std::pair<Eigen::VectorXi, Eigen::VectorXi> vad_mask(const AudioSignal& a,
                                                     const AudioSignal& b,
                                                     const VadOptions& opt) {
  if (a.samples.size() != b.samples.size() || a.sample_rate != b.sample_rate)
    throw std::invalid_argument("vad: channels must have equal duration");
  const int frame = static_cast<int>(std::lround(opt.frame_sec * a.sample_rate));
  const int frames = static_cast<int>(a.samples.size() / frame);
  Eigen::VectorXi mask_a(frames), mask_b(frames);
  for (int t = 0; t < frames; ++t) {
    const auto seg_a = a.samples.segment(static_cast<Eigen::Index>(t) * frame, frame);
    const auto seg_b = b.samples.segment(static_cast<Eigen::Index>(t) * frame, frame);
    const double ea = 10.0 * std::log10(seg_a.squaredNorm() / frame + 1e-12);
    const double eb = 10.0 * std::log10(seg_b.squaredNorm() / frame + 1e-12);
    mask_a[t] = (ea > opt.floor_db && ea > eb - opt.margin_db) ? 1 : 0;
    mask_b[t] = (eb > opt.floor_db && eb > ea - opt.margin_db) ? 1 : 0;
  }
  return {mask_a, mask_b};
}

}  // namespace faceflow
