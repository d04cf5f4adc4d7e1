#include "us3l/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "config_json.hpp"
#include "json_strict.hpp"

namespace us3l {

using nlohmann::json;
using detail::StrictObject;

std::string to_string(TargetMode mode) {
  return mode == TargetMode::momentum ? "momentum" : "detached_base";
}

TargetMode target_mode_from_string(const std::string& s) {
  if (s == "momentum") return TargetMode::momentum;
  if (s == "detached_base") return TargetMode::detached_base;
  throw std::invalid_argument("unknown target_mode '" + s +
                              "' (expected momentum|detached_base)");
}

namespace {

std::string to_string(NormKind k) {
  return k == NormKind::batch ? "batch" : "none";
}

NormKind norm_kind_from_string(const std::string& s) {
  if (s == "batch") return NormKind::batch;
  if (s == "none") return NormKind::none;
  throw std::invalid_argument("unknown norm kind '" + s +
                              "' (expected batch|none)");
}

std::string to_string(SamplingMode m) {
  return m == SamplingMode::dynamic ? "dynamic" : "static_sandwich";
}

SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "dynamic") return SamplingMode::dynamic;
  if (s == "static_sandwich") return SamplingMode::static_sandwich;
  throw std::invalid_argument("unknown sampling mode '" + s +
                              "' (expected dynamic|static_sandwich)");
}

std::string to_string(AugmentationPolicy::Kind k) {
  switch (k) {
    case AugmentationPolicy::Kind::identity: return "identity";
    case AugmentationPolicy::Kind::vector_default: return "vector_default";
    case AugmentationPolicy::Kind::image_default: return "image_default";
  }
  return "?";
}

AugmentationPolicy::Kind augment_kind_from_string(const std::string& s) {
  if (s == "identity") return AugmentationPolicy::Kind::identity;
  if (s == "vector_default") return AugmentationPolicy::Kind::vector_default;
  if (s == "image_default") return AugmentationPolicy::Kind::image_default;
  throw std::invalid_argument(
      "unknown augmentation kind '" + s +
      "' (expected identity|vector_default|image_default)");
}

}  // namespace

namespace detail {

EncoderSpec encoder_spec_from_json(const json& j, const std::string& path) {
  StrictObject o(j, path);
  EncoderSpec spec;
  spec.input_dim = o.get<int64_t>("input_dim", spec.input_dim);
  spec.backbone = o.get<std::vector<int64_t>>("backbone", spec.backbone);
  spec.projector_hidden =
      o.get<std::vector<int64_t>>("projector_hidden", spec.projector_hidden);
  spec.projector_dim = o.get<int64_t>("projector_dim", spec.projector_dim);
  spec.predictor_hidden =
      o.get<int64_t>("predictor_hidden", spec.predictor_hidden);
  spec.distill_hidden = o.get<int64_t>("distill_hidden", spec.distill_hidden);
  spec.norm = norm_kind_from_string(
      o.get<std::string>("norm", to_string(spec.norm)));
  // head_mode lives on the loss spec; the encoder copy is derived after load.
  o.finish();
  return spec;
}

json encoder_spec_to_json(const EncoderSpec& spec) {
  return json{{"input_dim", spec.input_dim},
              {"backbone", spec.backbone},
              {"projector_hidden", spec.projector_hidden},
              {"projector_dim", spec.projector_dim},
              {"predictor_hidden", spec.predictor_hidden},
              {"distill_hidden", spec.distill_hidden},
              {"norm", to_string(spec.norm)}};
}

}  // namespace detail

namespace {

LossSpec loss_from_json(const json& j, const std::string& path) {
  StrictObject o(j, path);
  LossSpec spec;
  spec.base_loss =
      base_loss_from_string(o.get<std::string>("base", to_string(spec.base_loss)));
  spec.distill_loss = distill_loss_from_string(
      o.get<std::string>("distill", to_string(spec.distill_loss)));
  spec.head_mode = head_mode_from_string(
      o.get<std::string>("head_mode", to_string(spec.head_mode)));
  spec.momentum_target_base =
      o.get<bool>("momentum_target_base", spec.momentum_target_base);
  spec.momentum_target_sub =
      o.get<bool>("momentum_target_sub", spec.momentum_target_sub);
  spec.temperature = o.get<double>("temperature", spec.temperature);
  spec.distill_weight = o.get<double>("distill_weight", spec.distill_weight);
  o.finish();
  return spec;
}

json loss_to_json(const LossSpec& spec) {
  return json{{"base", to_string(spec.base_loss)},
              {"distill", to_string(spec.distill_loss)},
              {"head_mode", to_string(spec.head_mode)},
              {"momentum_target_base", spec.momentum_target_base},
              {"momentum_target_sub", spec.momentum_target_sub},
              {"temperature", spec.temperature},
              {"distill_weight", spec.distill_weight}};
}

SamplingSchedule schedule_from_json(const json& j, const std::string& path) {
  StrictObject o(j, path);
  SamplingSchedule s;
  s.mode = sampling_mode_from_string(o.get<std::string>("mode", to_string(s.mode)));
  s.total_iters = o.get<int64_t>("total_iters", s.total_iters);
  s.r_min = o.get<double>("r_min", s.r_min);
  s.r_max = o.get<double>("r_max", s.r_max);
  s.samples_per_iter = o.get<int64_t>("samples_per_iter", s.samples_per_iter);
  s.grid_step = o.get<double>("grid_step", s.grid_step);
  s.universal = o.get<bool>("universal", s.universal);
  o.finish();
  return s;
}

json schedule_to_json(const SamplingSchedule& s) {
  return json{{"mode", to_string(s.mode)},
              {"total_iters", s.total_iters},
              {"r_min", s.r_min},
              {"r_max", s.r_max},
              {"samples_per_iter", s.samples_per_iter},
              {"grid_step", s.grid_step},
              {"universal", s.universal}};
}

GroupRegConfig groupreg_from_json(const json& j, const std::string& path) {
  StrictObject o(j, path);
  GroupRegConfig g;
  g.lambda = o.get<double>("lambda", g.lambda);
  g.groups = o.get<int64_t>("groups", g.groups);
  g.alpha = o.get<double>("alpha", g.alpha);
  o.finish();
  return g;
}

json groupreg_to_json(const GroupRegConfig& g) {
  return json{{"lambda", g.lambda}, {"groups", g.groups}, {"alpha", g.alpha}};
}

OptimizerConfig optimizer_from_json(const json& j, const std::string& path) {
  StrictObject o(j, path);
  OptimizerConfig opt;
  opt.base_lr = o.get<double>("base_lr", opt.base_lr);
  opt.momentum = o.get<double>("momentum", opt.momentum);
  opt.batch_size = o.get<int64_t>("batch_size", opt.batch_size);
  o.finish();
  return opt;
}

json optimizer_to_json(const OptimizerConfig& opt) {
  return json{{"base_lr", opt.base_lr},
              {"momentum", opt.momentum},
              {"batch_size", opt.batch_size}};
}

DataConfig data_from_json(const json& j, const std::string& path) {
  StrictObject o(j, path);
  DataConfig d;
  d.kind = o.get<std::string>("kind", d.kind);
  d.n = o.get<int64_t>("n", d.n);
  d.dim = o.get<int64_t>("dim", d.dim);
  d.classes = o.get<int64_t>("classes", d.classes);
  d.spread = o.get<double>("spread", d.spread);
  d.holdout_fraction = o.get<double>("holdout_fraction", d.holdout_fraction);
  d.path = o.get<std::string>("path", d.path);
  d.test_path = o.get<std::string>("test_path", d.test_path);
  d.limit = o.get<int64_t>("limit", d.limit);
  o.finish();
  return d;
}

json data_to_json(const DataConfig& d) {
  return json{{"kind", d.kind},
              {"n", d.n},
              {"dim", d.dim},
              {"classes", d.classes},
              {"spread", d.spread},
              {"holdout_fraction", d.holdout_fraction},
              {"path", d.path},
              {"test_path", d.test_path},
              {"limit", d.limit}};
}

AugmentationPolicy augment_from_json(const json& j, const std::string& path) {
  StrictObject o(j, path);
  AugmentationPolicy a;
  a.kind = augment_kind_from_string(o.get<std::string>("kind", to_string(a.kind)));
  a.noise_std = o.get<double>("noise_std", a.noise_std);
  a.dropout_p = o.get<double>("dropout_p", a.dropout_p);
  a.flip_p = o.get<double>("flip_p", a.flip_p);
  a.jitter = o.get<double>("jitter", a.jitter);
  a.crop_pad = o.get<int64_t>("crop_pad", a.crop_pad);
  o.finish();
  return a;
}

json augment_to_json(const AugmentationPolicy& a) {
  return json{{"kind", to_string(a.kind)}, {"noise_std", a.noise_std},
              {"dropout_p", a.dropout_p}, {"flip_p", a.flip_p},
              {"jitter", a.jitter},       {"crop_pad", a.crop_pad}};
}

ProbeConfig probe_from_json(const json& j, const std::string& path) {
  StrictObject o(j, path);
  ProbeConfig p;
  p.iters = o.get<int64_t>("iters", p.iters);
  p.lr = o.get<double>("lr", p.lr);
  p.momentum = o.get<double>("momentum", p.momentum);
  p.standardize = o.get<bool>("standardize", p.standardize);
  o.finish();
  return p;
}

json probe_to_json(const ProbeConfig& p) {
  return json{{"iters", p.iters},
              {"lr", p.lr},
              {"momentum", p.momentum},
              {"standardize", p.standardize}};
}

CollapseConfig collapse_from_json(const json& j, const std::string& path) {
  StrictObject o(j, path);
  CollapseConfig c;
  c.mean_abs_cos_threshold =
      o.get<double>("mean_abs_cos_threshold", c.mean_abs_cos_threshold);
  c.feature_std_threshold =
      o.get<double>("feature_std_threshold", c.feature_std_threshold);
  c.patience = o.get<int64_t>("patience", c.patience);
  o.finish();
  return c;
}

json collapse_to_json(const CollapseConfig& c) {
  return json{{"mean_abs_cos_threshold", c.mean_abs_cos_threshold},
              {"feature_std_threshold", c.feature_std_threshold},
              {"patience", c.patience}};
}

}  // namespace

TrainConfig load_train_config_text(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: invalid json: ") +
                                e.what());
  }

  StrictObject o(j, "");
  TrainConfig cfg;
  cfg.version = o.get<int>("version", cfg.version);
  if (cfg.version != 1)
    throw std::invalid_argument("config: unsupported version " +
                                std::to_string(cfg.version));
  cfg.seed = o.get<uint64_t>("seed", cfg.seed);
  cfg.output_dir = o.get<std::string>("output_dir", cfg.output_dir);
  cfg.encoder = detail::encoder_spec_from_json(o.child("encoder"), "encoder");
  cfg.loss = loss_from_json(o.child("loss"), "loss");
  cfg.schedule = schedule_from_json(o.child("schedule"), "schedule");
  cfg.groupreg = groupreg_from_json(o.child("groupreg"), "groupreg");
  cfg.optimizer = optimizer_from_json(o.child("optimizer"), "optimizer");
  cfg.data = data_from_json(o.child("data"), "data");
  cfg.augment = augment_from_json(o.child("augment"), "augment");
  cfg.probe = probe_from_json(o.child("probe"), "probe");
  cfg.collapse = collapse_from_json(o.child("collapse"), "collapse");
  cfg.ema_momentum = o.get<double>("ema_momentum", cfg.ema_momentum);
  cfg.teacher_full_width =
      o.get<bool>("teacher_full_width", cfg.teacher_full_width);
  cfg.ema_update_after_step =
      o.get<bool>("ema_update_after_step", cfg.ema_update_after_step);
  cfg.epochs = o.get<int64_t>("epochs", cfg.epochs);

  // target_mode defaults to whatever the loss flags imply.
  const bool wants_momentum =
      cfg.loss.momentum_target_base || cfg.loss.momentum_target_sub;
  cfg.target_mode = target_mode_from_string(o.get<std::string>(
      "target_mode",
      wants_momentum ? "momentum" : "detached_base"));
  o.finish();

  // Derived fields: the encoder mirrors the loss head mode; epochs resolve
  // into schedule iterations.
  cfg.encoder.head_mode = cfg.loss.head_mode;
  if (cfg.epochs > 0) {
    int64_t samples = cfg.data.n;
    if (cfg.data.kind != "blobs" && cfg.data.limit > 0) samples = cfg.data.limit;
    const int64_t per_epoch =
        std::max<int64_t>(1, samples / std::max<int64_t>(1, cfg.optimizer.batch_size));
    cfg.schedule.total_iters = cfg.epochs * per_epoch;
  }

  cfg.validate();
  return cfg;
}

TrainConfig load_train_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_train_config_text(ss.str());
}

std::string train_config_to_json_text(const TrainConfig& cfg, int indent) {
  json j{{"version", cfg.version},
         {"seed", cfg.seed},
         {"output_dir", cfg.output_dir},
         {"encoder", detail::encoder_spec_to_json(cfg.encoder)},
         {"loss", loss_to_json(cfg.loss)},
         {"schedule", schedule_to_json(cfg.schedule)},
         {"groupreg", groupreg_to_json(cfg.groupreg)},
         {"optimizer", optimizer_to_json(cfg.optimizer)},
         {"data", data_to_json(cfg.data)},
         {"augment", augment_to_json(cfg.augment)},
         {"probe", probe_to_json(cfg.probe)},
         {"collapse", collapse_to_json(cfg.collapse)},
         {"target_mode", to_string(cfg.target_mode)},
         {"ema_momentum", cfg.ema_momentum},
         {"teacher_full_width", cfg.teacher_full_width},
         {"ema_update_after_step", cfg.ema_update_after_step},
         {"epochs", cfg.epochs}};
  return j.dump(indent);
}

}  // namespace us3l
