#include "duet/wav.hpp"

#include "duet/binio.hpp"
#include "duet/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace duet {

namespace {
inline void write_u16(std::ostream& os, uint16_t x) {
    unsigned char b[2] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

inline uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    if (!is) throw InvalidInput("wav: unexpected end of file");
    return uint16_t(b[0]) | uint16_t(b[1]) << 8;
}
}  // namespace

void write_wav(const std::string& path, const Waveform& w) {
    if (w.samples.empty()) throw InvalidInput("write_wav: empty waveform");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("write_wav: cannot open " + path);
    const uint32_t n = uint32_t(w.samples.size());
    const uint32_t data_bytes = n * 2;
    os.write("RIFF", 4);
    write_u32(os, 36 + data_bytes);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    write_u32(os, 16);
    write_u16(os, 1);  // PCM
    write_u16(os, 1);  // mono
    write_u32(os, uint32_t(w.sample_rate));
    write_u32(os, uint32_t(w.sample_rate) * 2);
    write_u16(os, 2);   // block align
    write_u16(os, 16);  // bits per sample
    os.write("data", 4);
    write_u32(os, data_bytes);
    for (double x : w.samples) {
        double c = std::clamp(x, -1.0, 1.0);
        auto s = int16_t(std::lround(c * 32767.0));
        write_u16(os, uint16_t(s));
    }
}

Waveform read_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("read_wav: cannot open " + path);
    expect_magic(is, "RIFF", "wav");
    read_u32(is);
    expect_magic(is, "WAVE", "wav");

    Waveform w;
    uint32_t data_bytes = 0;
    bool got_fmt = false;
    while (true) {
        char id[4];
        is.read(id, 4);
        if (!is) break;
        uint32_t sz = read_u32(is);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            uint16_t fmt = read_u16(is);
            uint16_t channels = read_u16(is);
            w.sample_rate = int(read_u32(is));
            read_u32(is);
            read_u16(is);
            uint16_t bits = read_u16(is);
            if (fmt != 1 || channels != 1 || bits != 16) {
                throw InvalidInput("read_wav: only 16-bit PCM mono supported");
            }
            if (sz > 16) is.seekg(sz - 16, std::ios::cur);
            got_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data_bytes = sz;
            break;
        } else {
            is.seekg(sz, std::ios::cur);
        }
    }
    if (!got_fmt || data_bytes == 0) throw InvalidInput("read_wav: missing fmt/data chunk");
    const uint32_t n = data_bytes / 2;
    w.samples.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
        auto s = int16_t(read_u16(is));
        w.samples[i] = double(s) / 32767.0;
    }
    return w;
}

}  // namespace duet
