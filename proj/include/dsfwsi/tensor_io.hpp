#pragma once

#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "dsfwsi/errors.hpp"

namespace dsfwsi {

namespace fs = std::filesystem;

/// Minimal NumPy .npy (format 1.0, C order) reader/writer for float32,
/// float64 and int64 tensors.
void write_npy(const torch::Tensor& tensor, const fs::path& path);
torch::Tensor read_npy(const fs::path& path);

/// Writes every named parameter and buffer of `module` as `<name>.npy` under
/// `dir`.
void save_module_arrays(const torch::nn::Module& module, const fs::path& dir);

/// Loads arrays written by save_module_arrays into `module` in place. A
/// missing file raises IntegrityError naming the parameter; a shape mismatch
/// raises ShapeMismatchError naming it.
void load_module_arrays(torch::nn::Module& module, const fs::path& dir);

/// Order-sensitive FNV-1a digest over all parameters and buffers; used to
/// detect mutation and aliasing.
std::uint64_t module_checksum(const torch::nn::Module& module);

/// Bitwise equality of two modules' parameters and buffers (by name).
bool modules_bitwise_equal(const torch::nn::Module& a, const torch::nn::Module& b);

}  // namespace dsfwsi
