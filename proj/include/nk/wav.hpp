// Minimal WAV I/O: 16-bit PCM mono only, which is all the pipeline emits
// and ingests. Anything else is rejected rather than silently converted.
#pragma once

#include <string>

#include "nk/signal.hpp"

namespace nk {

TimeSignal read_wav(const std::string& path);
void write_wav(const std::string& path, const TimeSignal& x);

}  // namespace nk
