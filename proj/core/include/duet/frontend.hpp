#pragma once

#include "duet/tensor.hpp"
#include "duet/wav.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace duet {

constexpr int kNumMels = 80;
constexpr double kMelFloor = 1e-10;
constexpr double kMelFmin = 20.0;

// Log-mel frames for one utterance: frames is T x 80.
struct SpeechFeatures {
    Tensor frames;
    double frame_shift_ms = 10.0;
    int lang = 0;
};

// 25 ms / 10 ms Hann-window log-mel analysis, 80 bins from 20 Hz to Nyquist,
// log(mel_energy + 1e-10). Waveforms shorter than one window are zero-padded
// to a single frame; otherwise T = 1 + floor((len - window) / hop).
SpeechFeatures compute_log_mel(const Waveform& w, double window_ms = 25.0,
                               double hop_ms = 10.0);

// Feature cache file: "MU2F", u32 T, u32 80, then T*80 little-endian f32.
void write_features(const std::string& path, const Tensor& frames);
Tensor read_features(const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic corpus: one pure tone per token, languages are distinct token
// distributions over a shared character alphabet, translation is a seeded
// rank-preserving substitution between language vocabularies.
// ---------------------------------------------------------------------------

struct SyntheticCorpusSpec {
    int n_languages = 2;
    int utterances_per_lang = 32;
    int dev_utterances_per_lang = 8;  // held-out split, same generator
    int vocab_size = 16;
    uint64_t seed = 0;
    int min_duration_ms = 240;
    int max_duration_ms = 720;
};

constexpr int kToneMs = 60;
constexpr int kGapMs = 20;
constexpr int kTokenMs = kToneMs + kGapMs;

// Tone frequencies are mel-uniform over [300 Hz, 6 kHz] so every token id has
// a distinct spectral peak.
double tone_frequency(int token, int vocab_size);

// One tone per token, 5 ms cosine ramps, 20 ms silence gaps.
Waveform render_tones(const std::vector<int>& tokens, int vocab_size,
                      int sample_rate = 16000);

// Writes wav/, feat/, vocab.txt, manifest_train.jsonl, manifest_dev.jsonl and
// corpus_spec.json under out_dir. Identical spec => byte-identical output.
void make_corpus(const SyntheticCorpusSpec& spec, const std::string& out_dir);

}  // namespace duet
