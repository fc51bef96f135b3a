#pragma once

// Middlebury .flo: float magic 202021.25, int32 width, int32 height, then
// row-major interleaved float32 (u, v), all little-endian.

#include <bit>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "crossview/core.hpp"
#include "crossview/flow.hpp"

namespace crossview {

inline constexpr float kFloMagic = 202021.25f;

static_assert(std::endian::native == std::endian::little,
              "flo i/o assumes a little-endian host");

template <typename T>
void write_flo(const std::string& path, const FlowField<T>& flow) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IngestionError("write_flo: cannot open " + path);
  float magic = kFloMagic;
  std::int32_t w = flow.w(), h = flow.h();
  std::fwrite(&magic, 4, 1, f);
  std::fwrite(&w, 4, 1, f);
  std::fwrite(&h, 4, 1, f);
  std::vector<float> row(size_t(w) * 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      row[size_t(x) * 2 + 0] = float(flow.u(y, x));
      row[size_t(x) * 2 + 1] = float(flow.v(y, x));
    }
    std::fwrite(row.data(), 4, row.size(), f);
  }
  std::fclose(f);
}

template <typename T>
FlowField<T> read_flo(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IngestionError("read_flo: cannot open " + path);
  auto fail = [&](const std::string& msg) {
    long off = std::ftell(f);
    std::fclose(f);
    throw CheckpointError("read_flo: " + msg + " in " + path + " at offset " + std::to_string(off));
  };
  float magic = 0;
  std::int32_t w = 0, h = 0;
  if (std::fread(&magic, 4, 1, f) != 1) fail("truncated magic");
  if (magic != kFloMagic) fail("bad magic");
  if (std::fread(&w, 4, 1, f) != 1 || std::fread(&h, 4, 1, f) != 1) fail("truncated header");
  if (w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16) fail("implausible dimensions");
  FlowField<T> flow(h, w);
  std::vector<float> row(size_t(w) * 2);
  for (int y = 0; y < h; ++y) {
    if (std::fread(row.data(), 4, row.size(), f) != row.size()) fail("truncated data");
    for (int x = 0; x < w; ++x) {
      flow.u(y, x) = T(row[size_t(x) * 2 + 0]);
      flow.v(y, x) = T(row[size_t(x) * 2 + 1]);
    }
  }
  std::fclose(f);
  return flow;
}

}  // namespace crossview
