#include "nk/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace nk {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
  return (std::uint32_t)p[0] | ((std::uint32_t)p[1] << 8) |
         ((std::uint32_t)p[2] << 16) | ((std::uint32_t)p[3] << 24);
}

std::uint16_t rd_u16(const unsigned char* p) {
  return (std::uint16_t)((std::uint32_t)p[0] | ((std::uint32_t)p[1] << 8));
}

void wr_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back((char)((v >> (8 * i)) & 0xff));
}

void wr_u16(std::string& s, std::uint16_t v) {
  s.push_back((char)(v & 0xff));
  s.push_back((char)((v >> 8) & 0xff));
}

}  // namespace

TimeSignal read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw IoError(path + ": not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::uint32_t chunk_len = rd_u32(buf.data() + pos + 4);
    const unsigned char* body = buf.data() + pos + 8;
    if (pos + 8 + chunk_len > buf.size())
      throw IoError(path + ": truncated chunk");
    if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw IoError(path + ": malformed fmt chunk");
      format = rd_u16(body);
      channels = rd_u16(body + 2);
      rate = rd_u32(body + 4);
      bits = rd_u16(body + 14);
    } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);
  }

  if (!data || format == 0) throw IoError(path + ": missing fmt or data chunk");
  if (format != 1 || bits != 16)
    throw IoError(path + ": only 16-bit PCM is supported");
  if (channels != 1) throw IoError(path + ": only mono is supported");

  TimeSignal out;
  out.sample_rate = (double)rate;
  out.samples.resize(data_len / 2);
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    const std::int16_t s = (std::int16_t)rd_u16(data + 2 * i);
    out.samples[i] = (double)s / 32768.0;
  }
  return out;
}

void write_wav(const std::string& path, const TimeSignal& x) {
  x.validate();
  const std::uint32_t rate = (std::uint32_t)std::lround(x.sample_rate);
  const std::uint32_t data_len = (std::uint32_t)(x.samples.size() * 2);

  std::string out;
  out.reserve(44 + data_len);
  out += "RIFF";
  wr_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  wr_u32(out, 16);
  wr_u16(out, 1);   // PCM
  wr_u16(out, 1);   // mono
  wr_u32(out, rate);
  wr_u32(out, rate * 2);  // byte rate
  wr_u16(out, 2);   // block align
  wr_u16(out, 16);  // bits
  out += "data";
  wr_u32(out, data_len);
  for (double v : x.samples) {
    long s = std::lround(v * 32768.0);  // inverse of the read scaling
    if (s > 32767) s = 32767;
    if (s < -32768) s = -32768;
    wr_u16(out, (std::uint16_t)(std::int16_t)s);
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(out.data(), (std::streamsize)out.size());
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace nk
