#include "us3l/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace us3l {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

}  // namespace

int64_t cifar_record_size(CifarVariant variant) {
  return variant == CifarVariant::cifar10 ? kCifarImageBytes + 1
                                          : kCifarImageBytes + 2;
}

std::vector<ImageRecord> parse_cifar_bytes(std::span<const uint8_t> bytes,
                                           CifarVariant variant) {
  const int64_t record_size = cifar_record_size(variant);
  const int64_t label_bytes = record_size - kCifarImageBytes;
  const int64_t total = static_cast<int64_t>(bytes.size());
  if (total % record_size != 0) {
    const int64_t offset = (total / record_size) * record_size;
    throw std::runtime_error(
        "cifar parse error: file length " + std::to_string(total) +
        " is not a multiple of the record size " + std::to_string(record_size) +
        "; trailing data begins at offset " + std::to_string(offset));
  }
  std::vector<ImageRecord> records;
  records.reserve(static_cast<std::size_t>(total / record_size));
  for (int64_t pos = 0; pos < total; pos += record_size) {
    ImageRecord rec;
    rec.labels.assign(bytes.begin() + pos, bytes.begin() + pos + label_bytes);
    rec.pixels.assign(bytes.begin() + pos + label_bytes,
                      bytes.begin() + pos + record_size);
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<ImageRecord> parse_cifar(const std::string& path,
                                     CifarVariant variant) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open cifar file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return parse_cifar_bytes(bytes, variant);
}

std::vector<uint8_t> serialize_cifar(const std::vector<ImageRecord>& records,
                                     CifarVariant variant) {
  const int64_t label_bytes = cifar_record_size(variant) - kCifarImageBytes;
  std::vector<uint8_t> out;
  out.reserve(records.size() *
              static_cast<std::size_t>(cifar_record_size(variant)));
  for (const ImageRecord& rec : records) {
    check(static_cast<int64_t>(rec.labels.size()) == label_bytes,
          "serialize_cifar: record has wrong label byte count");
    check(static_cast<int64_t>(rec.pixels.size()) == kCifarImageBytes,
          "serialize_cifar: record has wrong pixel byte count");
    out.insert(out.end(), rec.labels.begin(), rec.labels.end());
    out.insert(out.end(), rec.pixels.begin(), rec.pixels.end());
  }
  return out;
}

void write_cifar(const std::string& path,
                 const std::vector<ImageRecord>& records,
                 CifarVariant variant) {
  auto bytes = serialize_cifar(records, variant);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write cifar file: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

DataSet synthetic_blobs(int64_t n, int64_t dim, int64_t classes, double spread,
                        uint64_t seed) {
  check(classes >= 2, "synthetic_blobs: need at least 2 classes");
  check(n >= classes, "synthetic_blobs: need at least one sample per class");
  check(dim >= 1, "synthetic_blobs: dim must be >= 1");
  check(spread >= 0.0, "synthetic_blobs: spread must be >= 0");

  Rng rng(seed);
  Rng center_rng = rng.split(1);
  Rng sample_rng = rng.split(2);

  // Unit-norm class centers.
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(classes));
  for (auto& c : centers) {
    c.resize(static_cast<std::size_t>(dim));
    double norm = 0.0;
    for (double& v : c) {
      v = center_rng.gauss();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : c) v /= std::max(norm, 1e-12);
  }

  DataSet data;
  data.kind = DataSet::Kind::vectors;
  data.feature_dim = dim;
  data.classes = classes;
  data.features.reserve(static_cast<std::size_t>(n));
  data.labels.reserve(static_cast<std::size_t>(n));
  // Round-robin class assignment keeps the class counts balanced within 1.
  for (int64_t i = 0; i < n; ++i) {
    const int64_t label = i % classes;
    std::vector<double> x(static_cast<std::size_t>(dim));
    for (int64_t j = 0; j < dim; ++j)
      x[static_cast<std::size_t>(j)] =
          centers[static_cast<std::size_t>(label)][static_cast<std::size_t>(j)] +
          spread * sample_rng.gauss();
    data.features.push_back(std::move(x));
    data.labels.push_back(label);
  }
  return data;
}

DataSet dataset_from_cifar(const std::vector<ImageRecord>& records,
                           CifarVariant variant) {
  DataSet data;
  data.kind = DataSet::Kind::images;
  data.feature_dim = kCifarImageBytes;
  data.classes = variant == CifarVariant::cifar10 ? 10 : 100;
  data.features.reserve(records.size());
  data.labels.reserve(records.size());
  for (const ImageRecord& rec : records) {
    std::vector<double> x(static_cast<std::size_t>(kCifarImageBytes));
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = static_cast<double>(rec.pixels[i]) / 255.0;
    data.features.push_back(std::move(x));
    // cifar100 stores (coarse, fine); only the fine label is consumed.
    data.labels.push_back(static_cast<int64_t>(rec.labels.back()));
  }
  return data;
}

std::vector<double> hflip_image(std::span<const double> pixels, int64_t side,
                                int64_t channels) {
  check(static_cast<int64_t>(pixels.size()) == side * side * channels,
        "hflip_image: size mismatch");
  std::vector<double> out(pixels.size());
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t y = 0; y < side; ++y)
      for (int64_t x = 0; x < side; ++x)
        out[static_cast<std::size_t>((c * side + y) * side + x)] =
            pixels[static_cast<std::size_t>((c * side + y) * side +
                                            (side - 1 - x))];
  return out;
}

namespace {

std::vector<double> shift_image(const std::vector<double>& pixels, int64_t side,
                                int64_t channels, int64_t dx, int64_t dy) {
  std::vector<double> out(pixels.size(), 0.0);
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t y = 0; y < side; ++y) {
      const int64_t sy = y + dy;
      if (sy < 0 || sy >= side) continue;
      for (int64_t x = 0; x < side; ++x) {
        const int64_t sx = x + dx;
        if (sx < 0 || sx >= side) continue;
        out[static_cast<std::size_t>((c * side + y) * side + x)] =
            pixels[static_cast<std::size_t>((c * side + sy) * side + sx)];
      }
    }
  return out;
}

std::vector<double> augment_once(const DataSet& data,
                                 const std::vector<double>& x,
                                 const AugmentationPolicy& policy, Rng& rng,
                                 std::vector<AugmentationLogEntry>& log) {
  if (policy.kind == AugmentationPolicy::Kind::identity) {
    log.push_back({"identity", {}});
    return x;
  }

  std::vector<double> out = x;
  if (policy.kind == AugmentationPolicy::Kind::image_default &&
      data.kind == DataSet::Kind::images) {
    const int64_t side = kCifarSide, channels = 3;
    if (policy.crop_pad > 0) {
      const int64_t span = 2 * policy.crop_pad + 1;
      const int64_t dx =
          static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(span))) -
          policy.crop_pad;
      const int64_t dy =
          static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(span))) -
          policy.crop_pad;
      out = shift_image(out, side, channels, dx, dy);
      log.push_back({"crop_shift", {static_cast<double>(dx), static_cast<double>(dy)}});
    }
    if (rng.bernoulli(policy.flip_p)) {
      out = hflip_image(out, side, channels);
      log.push_back({"hflip", {}});
    }
    if (policy.jitter > 0.0) {
      std::vector<double> scales;
      for (int64_t c = 0; c < channels; ++c) {
        const double s = 1.0 + rng.uniform(-policy.jitter, policy.jitter);
        scales.push_back(s);
        for (int64_t i = 0; i < side * side; ++i) {
          auto& v = out[static_cast<std::size_t>(c * side * side + i)];
          v = std::clamp(v * s, 0.0, 1.0);
        }
      }
      log.push_back({"channel_jitter", scales});
    }
    if (policy.noise_std > 0.0) {
      for (double& v : out) v += policy.noise_std * rng.gauss();
      log.push_back({"gauss_noise", {policy.noise_std}});
    }
    return out;
  }

  // Vector policy: additive noise plus feature dropout.
  if (policy.noise_std > 0.0) {
    for (double& v : out) v += policy.noise_std * rng.gauss();
    log.push_back({"gauss_noise", {policy.noise_std}});
  }
  if (policy.dropout_p > 0.0) {
    double dropped = 0.0;
    for (double& v : out)
      if (rng.bernoulli(policy.dropout_p)) {
        v = 0.0;
        dropped += 1.0;
      }
    log.push_back({"feature_dropout", {policy.dropout_p, dropped}});
  }
  return out;
}

}  // namespace

ViewPair two_view_augment(const DataSet& data, int64_t index,
                          const AugmentationPolicy& policy, Rng& rng) {
  check(index >= 0 && index < data.size(), "two_view_augment: index out of range");
  const auto& x = data.features[static_cast<std::size_t>(index)];
  ViewPair pair;
  pair.source_id = index;
  pair.view1 = augment_once(data, x, policy, rng, pair.log1);
  pair.view2 = augment_once(data, x, policy, rng, pair.log2);
  return pair;
}

Tensor stack_batch(const std::vector<std::vector<double>>& rows) {
  check(!rows.empty(), "stack_batch: empty batch");
  const int64_t d = static_cast<int64_t>(rows.front().size());
  std::vector<double> flat;
  flat.reserve(rows.size() * static_cast<std::size_t>(d));
  for (const auto& row : rows) {
    check(static_cast<int64_t>(row.size()) == d,
          "stack_batch: ragged feature rows");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return Tensor::from_data({static_cast<int64_t>(rows.size()), d},
                           std::move(flat));
}

}  // namespace us3l
