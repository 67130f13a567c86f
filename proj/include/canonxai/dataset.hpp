#pragma once

#include <optional>
#include <string>
#include <vector>

#include "canonxai/error.hpp"
#include "canonxai/tensor.hpp"

namespace canonxai {

struct Sample {
  std::string id;
  Tensor image;  // C x H x W
  std::size_t label = 0;
  std::optional<Tensor> mask;  // H x W, values 0 / 1

  friend bool operator==(const Sample&, const Sample&) = default;
};

class DatasetError : public Error {
 public:
  DatasetError(const std::string& what, std::string sample_id)
      : Error(what), sample_id_(std::move(sample_id)) {}
  const std::string& sample_id() const { return sample_id_; }

 private:
  std::string sample_id_;
};

// Tensor files: 8-byte magic, u32 rank, u32 extents, little-endian payload.
// "CXAI_F32" carries float32 values, "CXAI_U8_" one byte per value.
void save_tensor_file(const std::string& path, const Tensor& t);
void save_mask_file(const std::string& path, const Tensor& mask);
/// Reads either payload kind.
Tensor load_tensor_file(const std::string& path);

/// Manifest: {"samples": [{"id", "image", "label", "mask"?}]}; file paths
/// are relative to the manifest's directory.
std::vector<Sample> load_dataset(const std::string& manifest_path);
/// Writes the manifest plus <id>.image.cxt / <id>.mask.cxt next to it.
void save_dataset(const std::string& manifest_path, const std::vector<Sample>& samples);

}  // namespace canonxai
