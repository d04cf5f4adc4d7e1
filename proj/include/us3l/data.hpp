#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "us3l/rng.hpp"
#include "us3l/tensor.hpp"

// Datasets and two-view augmentation: the CIFAR binary format, a synthetic
// Gaussian-blob generator for desk-scale runs, and the augmentation policies
// that produce paired views.

namespace us3l {

enum class CifarVariant { cifar10, cifar100 };

constexpr int64_t kCifarImageBytes = 3072;  // 32x32x3, channel-planar
constexpr int64_t kCifarSide = 32;

int64_t cifar_record_size(CifarVariant variant);  // 3073 or 3074

struct ImageRecord {
  std::vector<uint8_t> labels;  // cifar10: {label}; cifar100: {coarse, fine}
  std::vector<uint8_t> pixels;  // channel-planar, 3072 bytes
};

std::vector<ImageRecord> parse_cifar_bytes(std::span<const uint8_t> bytes,
                                           CifarVariant variant);
std::vector<ImageRecord> parse_cifar(const std::string& path,
                                     CifarVariant variant);
std::vector<uint8_t> serialize_cifar(const std::vector<ImageRecord>& records,
                                     CifarVariant variant);
void write_cifar(const std::string& path,
                 const std::vector<ImageRecord>& records, CifarVariant variant);

// In-memory labeled dataset with flat double features.
struct DataSet {
  enum class Kind { vectors, images };
  Kind kind = Kind::vectors;
  int64_t feature_dim = 0;
  int64_t classes = 0;
  std::vector<std::vector<double>> features;
  std::vector<int64_t> labels;

  int64_t size() const { return static_cast<int64_t>(features.size()); }
};

// Class-balanced Gaussian clusters with unit-norm centers; spread is the
// cluster standard deviation relative to the center scale.
DataSet synthetic_blobs(int64_t n, int64_t dim, int64_t classes, double spread,
                        uint64_t seed);

// Pixels to [0,1] doubles; cifar100 keeps only the fine label.
DataSet dataset_from_cifar(const std::vector<ImageRecord>& records,
                           CifarVariant variant);

struct AugmentationPolicy {
  enum class Kind { identity, vector_default, image_default };
  Kind kind = Kind::vector_default;
  double noise_std = 0.1;   // additive gaussian noise (both kinds)
  double dropout_p = 0.1;   // per-feature dropout (vectors)
  double flip_p = 0.5;      // horizontal flip probability (images)
  double jitter = 0.2;      // per-channel scale jitter (images)
  int64_t crop_pad = 2;     // max shift of the random crop (images)
};

struct AugmentationLogEntry {
  std::string op;
  std::vector<double> params;
};

struct ViewPair {
  int64_t source_id = 0;
  std::vector<double> view1, view2;
  std::vector<AugmentationLogEntry> log1, log2;
};

// Two independent draws from the same policy applied to one record.
ViewPair two_view_augment(const DataSet& data, int64_t index,
                          const AugmentationPolicy& policy, Rng& rng);

// Horizontal flip of a channel-planar image; an involution.
std::vector<double> hflip_image(std::span<const double> pixels, int64_t side,
                                int64_t channels);

// Stacks per-sample feature vectors into a [n, d] batch tensor.
Tensor stack_batch(const std::vector<std::vector<double>>& rows);

}  // namespace us3l
