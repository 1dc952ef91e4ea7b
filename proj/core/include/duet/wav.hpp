#pragma once

#include <string>
#include <vector>

namespace duet {

// Mono audio in [-1, 1].
struct Waveform {
    std::vector<double> samples;
    int sample_rate = 16000;
};

// 16-bit PCM mono WAV. Anything else (stereo, other bit depths) is rejected.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

}  // namespace duet
