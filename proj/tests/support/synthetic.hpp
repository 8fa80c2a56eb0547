#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "polypseg/data.hpp"

namespace polypseg::testing {

/// Colonoscopy-like frame: reddish mucosa with vignetting, folds and noise,
/// one lobed polyp of a different tint with specular spots. The mask is the polyp.
SamplePair synthetic_polyp(std::uint64_t seed, Index height, Index width, const std::string& id);

std::vector<SamplePair> synthetic_dataset(std::uint64_t seed, std::size_t count, Index height, Index width);

/// Writes `<root>/images/<id>.png` and `<root>/masks/<id>.png`.
void write_dataset(const std::filesystem::path& root, const std::vector<SamplePair>& pairs);

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace polypseg::testing
