#pragma once

#include <complex>
#include <utility>
#include <vector>

#include "faceflow/dense.hpp"

namespace faceflow {

struct AudioSignal {
  VecXd samples;  // in [-1, 1]
  double sample_rate = 16000.0;
};

// Analysis constants. 20 ms windows with 10 ms hops give features at 100 fps,
// later averaged 4:1 onto the 25 fps video grid.
inline constexpr double kFrameWindowSec = 0.02;
inline constexpr double kFrameHopSec = 0.01;
inline constexpr int kNfft = 1024;
inline constexpr int kNumMelFilters = 26;
inline constexpr int kNumCepstra = 25;  // DCT coefficients 1..25, c0 dropped
inline constexpr double kPreEmphasis = 0.97;
inline constexpr double kEnergyFloor = 1e-10;
inline constexpr int kMfccDim = kNumCepstra + 1;   // + log energy
inline constexpr int kProsodyDim = 4;              // pitch, dpitch, energy, denergy
inline constexpr int kAcousticRate = 100;          // fps before downsampling

void fft_inplace(std::vector<std::complex<double>>& a);

double hz_to_mel(double hz);
double mel_to_hz(double mel);
// filters x (nfft/2 + 1) triangular filterbank from 0 Hz to Nyquist
MatXd mel_filterbank(int num_filters, int nfft, double sample_rate);

// 26 rows (25 cepstra + log frame energy) per 100 fps frame.
MatXd compute_mfcc_energy(const AudioSignal& audio);

// 4 rows (pitch Hz, pitch delta, log energy, energy delta) on the same grid.
// Pitch by normalized autocorrelation over 40 ms windows, 75-500 Hz search,
// 0 when unvoiced.
MatXd compute_prosody(const AudioSignal& audio);

// Concatenate 26D + 4D at 100 fps and average each group of 4 frames down to
// the 25 fps track.
MatXd assemble_acoustic(const MatXd& mfcc_energy, const MatXd& prosody);

// Savitzky-Golay smoothing (window 9, order 3) per channel. Edge frames are
// evaluated from the least-squares fit of the nearest full window, which
// keeps polynomials of degree <= 3 exact everywhere. Tracks shorter than the
// window are returned unmodified.
MatXd savgol_smooth(const MatXd& track, int window = 9, int order = 3);

// Least-squares evaluation weights: row e gives the taps that evaluate the
// fitted polynomial at window position e.
MatXd savgol_coefficients(int window, int order);

struct VadOptions {
  double frame_sec = 0.04;   // one mask value per 25 fps video frame
  double floor_db = -50.0;   // absolute activity floor
  double margin_db = 6.0;    // tolerated gap below the other channel
};

// Energy-based crosstalk VAD: a channel is active when it clears the floor
// and is not dominated by the other channel.
std::pair<Eigen::VectorXi, Eigen::VectorXi> vad_mask(
    const AudioSignal& a, const AudioSignal& b, const VadOptions& opt = {});

}  // namespace faceflow
