// SPDX-License-Identifier: Apache-2.0
#include "pfls/generator.hpp"

#include <optional>

namespace pfls {
namespace {

void add_into(Tensor& into, const Tensor& add) {
  if (!into.same_shape(add)) throw ShapeError("gradient accumulation: shape mismatch");
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += add[i];
}

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  add_into(out, b);
  return out;
}

Tensor as_chw(const Tensor& image) {
  if (image.rank() == 3) return image;
  if (image.rank() == 2) {
    Tensor out({1, image.dim(0), image.dim(1)});
    std::copy(image.data(), image.data() + image.size(), out.data());
    return out;
  }
  throw ShapeError("expected a {H, W} or {1, H, W} image, got " + image.shape_string());
}

}  // namespace

void ModelSpec::validate() const {
  if (image_size < 8 || image_size % 4 != 0) {
    throw ConfigError("image size must be a multiple of 4 and at least 8");
  }
  if (base_width < 1) throw ConfigError("base width must be positive");
  if (bottleneck_depth < 1 || bottleneck_depth > 9) {
    throw ConfigError("bottleneck depth must be between 1 and 9");
  }
  if (latent_dim < 1) throw ConfigError("latent dimension must be positive");
  if (site_slots < 1) throw ConfigError("site slots must be positive");
  if (contrast_slots < 1) throw ConfigError("contrast slots must be positive");
  if (mapper_layers < 1) throw ConfigError("mapper needs at least one layer");
  if (cw_hidden < 1) throw ConfigError("channel-weighting hidden width must be positive");
  stage_order(split_stage, bottleneck_depth);  // throws on an unknown stage
}

Tensor ConditionCodes::concat() const {
  Tensor out({site.dim(0) + task.dim(0)});
  std::copy(site.data(), site.data() + site.size(), out.data());
  std::copy(task.data(), task.data() + task.size(), out.data() + site.size());
  return out;
}

ConditionCodes make_codes(const ModelSpec& spec, int site_index, const TaskConfig& task) {
  if (site_index < 0 || site_index >= spec.site_slots) {
    throw ConfigError("site index " + std::to_string(site_index) + " does not fit into " +
                      std::to_string(spec.site_slots) + " site slots");
  }
  const int src = static_cast<int>(task.source);
  const int tgt = static_cast<int>(task.target);
  if (src >= spec.contrast_slots || tgt >= spec.contrast_slots) {
    throw ConfigError("task " + task.to_string() + " does not fit into " +
                      std::to_string(spec.contrast_slots) + " contrast slots");
  }
  ConditionCodes codes;
  codes.site = Tensor({spec.site_slots});
  codes.task = Tensor({2 * spec.contrast_slots});
  if (spec.use_site_code) codes.site[site_index] = 1.0f;
  if (spec.use_task_code) {
    codes.task[src] = 1.0f;
    codes.task[static_cast<std::size_t>(spec.contrast_slots) + tgt] = 1.0f;
  }
  return codes;
}

namespace detail {

// Personalization block: adaptive instance normalization driven by latent
// projections, followed by latent-driven per-channel weighting. Either half
// can be disabled by the ablation switches.
class Pb {
 public:
  Pb(ParamRegistry& registry, const std::string& prefix, int channels, int latent_dim,
     int cw_hidden, bool use_adain, bool use_adacw, Rng& rng)
      : use_adain_(use_adain), use_adacw_(use_adacw) {
    if (use_adain_) {
      scale_proj_.emplace(registry, prefix + ".scale", ParamTag::Personalization, latent_dim,
                          channels, LinearInit::ZeroBiasOne, rng);
      shift_proj_.emplace(registry, prefix + ".shift", ParamTag::Personalization, latent_dim,
                          channels, LinearInit::Zero, rng);
    }
    if (use_adacw_) {
      cw_mlp_.emplace(registry, prefix + ".cw", ParamTag::Personalization,
                      std::vector<int>{latent_dim, cw_hidden, channels}, LinearInit::HeNormal,
                      LinearInit::ZeroBiasOne, rng);
    }
  }

  Tensor forward(const Tensor& x, const Tensor& latent) {
    Tensor h = x;
    if (use_adain_) {
      const Tensor gamma = scale_proj_->forward(latent);
      const Tensor beta = shift_proj_->forward(latent);
      h = adain_forward(h, gamma, beta, adain_cache_);
    }
    if (use_adacw_) {
      const Tensor weights = cw_mlp_->forward(latent);
      h = channel_scale_forward(h, weights, cw_cache_);
    }
    return h;
  }

  Tensor backward(const Tensor& dy, Tensor& dlatent) {
    Tensor g = dy;
    if (use_adacw_) {
      Tensor dweights;
      g = channel_scale_backward(cw_cache_, g, dweights);
      add_into(dlatent, cw_mlp_->backward(dweights));
    }
    if (use_adain_) {
      Tensor dgamma, dbeta;
      g = adain_backward(adain_cache_, g, dgamma, dbeta);
      add_into(dlatent, scale_proj_->backward(dgamma));
      add_into(dlatent, shift_proj_->backward(dbeta));
    }
    return g;
  }

 private:
  bool use_adain_, use_adacw_;
  std::optional<Linear> scale_proj_;  // latent -> per-channel scale
  std::optional<Linear> shift_proj_;  // latent -> per-channel shift
  std::optional<Mlp> cw_mlp_;         // latent -> per-channel weight
  AdaInCache adain_cache_;
  ChannelScaleCache cw_cache_;
};

class Stage {
 public:
  explicit Stage(std::string name) : name_(std::move(name)) {}
  virtual ~Stage() = default;
  virtual Tensor forward(const Tensor& x, const Tensor& latent) = 0;
  virtual Tensor backward(const Tensor& dy, Tensor& dlatent) = 0;
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

// Convolution -> personalization -> ReLU.
class EncoderStage : public Stage {
 public:
  EncoderStage(std::string name, ParamRegistry& registry, const std::string& prefix, ParamTag tag,
               int in_c, int out_c, int kernel, int stride, std::unique_ptr<Pb> pb, Rng& rng)
      : Stage(std::move(name)),
        conv_(registry, prefix + ".conv", tag, in_c, out_c, kernel, stride, (kernel - 1) / 2,
              rng),
        pb_(std::move(pb)) {}

  Tensor forward(const Tensor& x, const Tensor& latent) override {
    Tensor h = conv_.forward(x);
    if (pb_) h = pb_->forward(h, latent);
    pre_act_ = h;
    return relu_forward(h);
  }

  Tensor backward(const Tensor& dy, Tensor& dlatent) override {
    Tensor g = relu_backward(pre_act_, dy);
    if (pb_) g = pb_->backward(g, dlatent);
    return conv_.backward(g);
  }

 private:
  Conv2d conv_;
  std::unique_ptr<Pb> pb_;
  Tensor pre_act_;
};

// x + PB(conv(relu(conv(x)))) — the personalization acts on the branch
// before the skip connection rejoins.
class ResidualStage : public Stage {
 public:
  ResidualStage(std::string name, ParamRegistry& registry, const std::string& prefix,
                ParamTag tag, int channels, std::unique_ptr<Pb> pb, Rng& rng)
      : Stage(std::move(name)),
        conv1_(registry, prefix + ".conv1", tag, channels, channels, 3, 1, 1, rng),
        conv2_(registry, prefix + ".conv2", tag, channels, channels, 3, 1, 1, rng),
        pb_(std::move(pb)) {}

  Tensor forward(const Tensor& x, const Tensor& latent) override {
    mid_ = conv1_.forward(x);
    Tensor h = conv2_.forward(relu_forward(mid_));
    if (pb_) h = pb_->forward(h, latent);
    return add_tensors(x, h);
  }

  Tensor backward(const Tensor& dy, Tensor& dlatent) override {
    Tensor g = dy;
    if (pb_) g = pb_->backward(g, dlatent);
    g = conv2_.backward(g);
    g = relu_backward(mid_, g);
    g = conv1_.backward(g);
    return add_tensors(g, dy);
  }

 private:
  Conv2d conv1_;
  Conv2d conv2_;
  std::unique_ptr<Pb> pb_;
  Tensor mid_;  // pre-activation of the first convolution
};

// Transposed convolution -> personalization -> ReLU (exact 2x upsampling).
class DecoderStage : public Stage {
 public:
  DecoderStage(std::string name, ParamRegistry& registry, const std::string& prefix, ParamTag tag,
               int in_c, int out_c, std::unique_ptr<Pb> pb, Rng& rng)
      : Stage(std::move(name)),
        deconv_(registry, prefix + ".deconv", tag, in_c, out_c, 3, 2, 1, rng),
        pb_(std::move(pb)) {}

  Tensor forward(const Tensor& x, const Tensor& latent) override {
    Tensor h = deconv_.forward(x);
    if (pb_) h = pb_->forward(h, latent);
    pre_act_ = h;
    return relu_forward(h);
  }

  Tensor backward(const Tensor& dy, Tensor& dlatent) override {
    Tensor g = relu_backward(pre_act_, dy);
    if (pb_) g = pb_->backward(g, dlatent);
    return deconv_.backward(g);
  }

 private:
  ConvTranspose2d deconv_;
  std::unique_ptr<Pb> pb_;
  Tensor pre_act_;
};

// Final projection to one channel with tanh output range.
class OutputStage : public Stage {
 public:
  OutputStage(std::string name, ParamRegistry& registry, const std::string& prefix, ParamTag tag,
              int in_c, Rng& rng)
      : Stage(std::move(name)), conv_(registry, prefix + ".conv", tag, in_c, 1, 7, 1, 3, rng) {}

  Tensor forward(const Tensor& x, const Tensor&) override {
    out_ = tanh_forward(conv_.forward(x));
    return out_;
  }

  Tensor backward(const Tensor& dy, Tensor&) override {
    return conv_.backward(tanh_backward(out_, dy));
  }

 private:
  Conv2d conv_;
  Tensor out_;
};

}  // namespace detail

Generator::Generator(const ModelSpec& spec, std::uint64_t init_seed) : spec_(spec) {
  spec_.validate();
  Rng rng(derive_seed(init_seed, "model"));
  const int depth = spec_.bottleneck_depth;
  const int split_order = stage_order(spec_.split_stage, depth);

  if (spec_.use_mapper) {
    std::vector<int> dims;
    dims.push_back(spec_.code_length());
    for (int i = 0; i < spec_.mapper_layers; ++i) dims.push_back(spec_.latent_dim);
    mapper_ = std::make_unique<Mlp>(registry_, "mapper", ParamTag::Mapper, dims,
                                    LinearInit::HeNormal, LinearInit::HeNormal, rng);
  }

  const int w0 = spec_.base_width;
  const int w1 = 2 * w0;
  const int w2 = 4 * w0;
  const int latent = spec_.latent_input_dim();
  const bool pb_enabled = spec_.use_adain || spec_.use_adacw;

  auto make_pb = [&](const std::string& prefix, int channels) -> std::unique_ptr<detail::Pb> {
    if (!pb_enabled) return nullptr;
    return std::make_unique<detail::Pb>(registry_, prefix + ".pb", channels, latent,
                                        spec_.cw_hidden, spec_.use_adain, spec_.use_adacw, rng);
  };
  auto tag_for = [&](const std::string& stage_name) {
    return stage_order(stage_name, depth) <= split_order ? ParamTag::Upstream
                                                         : ParamTag::Downstream;
  };
  auto add_stage = [&](std::unique_ptr<detail::Stage> stage) {
    stage_names_.push_back(stage->name());
    stages_.push_back(std::move(stage));
  };

  struct EncoderPlan {
    const char* name;
    int in_c, out_c, kernel, stride;
  };
  const EncoderPlan encoder[] = {{"e1", 1, w0, 7, 1}, {"e2", w0, w1, 3, 2}, {"e3", w1, w2, 3, 2}};
  for (const auto& e : encoder) {
    const std::string prefix = std::string("synthesizer.") + e.name;
    add_stage(std::make_unique<detail::EncoderStage>(e.name, registry_, prefix, tag_for(e.name),
                                                     e.in_c, e.out_c, e.kernel, e.stride,
                                                     make_pb(prefix, e.out_c), rng));
  }
  for (int i = 1; i <= depth; ++i) {
    const std::string name = "r" + std::to_string(i);
    const std::string prefix = "synthesizer." + name;
    add_stage(std::make_unique<detail::ResidualStage>(name, registry_, prefix, tag_for(name), w2,
                                                      make_pb(prefix, w2), rng));
  }
  const std::string d1 = "synthesizer.d1";
  add_stage(std::make_unique<detail::DecoderStage>("d1", registry_, d1, tag_for("d1"), w2, w1,
                                                   make_pb(d1, w1), rng));
  const std::string d2 = "synthesizer.d2";
  add_stage(std::make_unique<detail::DecoderStage>("d2", registry_, d2, tag_for("d2"), w1, w0,
                                                   make_pb(d2, w0), rng));
  add_stage(
      std::make_unique<detail::OutputStage>("d3", registry_, "synthesizer.d3", tag_for("d3"), w0,
                                            rng));
}

Generator::~Generator() = default;

int Generator::stage_index(const std::string& stage_name) const {
  for (std::size_t i = 0; i < stage_names_.size(); ++i) {
    if (stage_names_[i] == stage_name) return static_cast<int>(i);
  }
  throw ConfigError("unknown stage '" + stage_name + "'");
}

Tensor Generator::map_latent(const ConditionCodes& codes) {
  if (codes.site.rank() != 1 || codes.site.dim(0) != spec_.site_slots ||
      codes.task.rank() != 1 || codes.task.dim(0) != 2 * spec_.contrast_slots) {
    throw ShapeError("condition codes do not match the model's slot sizes");
  }
  const Tensor code = codes.concat();
  return spec_.use_mapper ? mapper_->forward(code) : code;
}

void Generator::reset_site_slots(const std::vector<int>& slots) {
  if (!spec_.use_mapper) return;
  Parameter& fc1 = registry_.at("mapper.fc1.weight");
  const int out_dim = fc1.value.dim(0);
  const int in_dim = fc1.value.dim(1);
  for (int slot : slots) {
    if (slot < 0 || slot >= spec_.site_slots) {
      throw ConfigError("site slot " + std::to_string(slot) + " out of range");
    }
    for (int o = 0; o < out_dim; ++o) {
      fc1.value.data()[static_cast<std::size_t>(o) * in_dim + slot] = 0.0f;
    }
  }
}

Tensor Generator::run_stages(std::size_t begin, const Tensor& input, const Tensor& latent) {
  Tensor h = input;
  const bool capture = capture_ && begin == 0;
  if (capture) {
    stage_outputs_.clear();
    stage_outputs_.reserve(stages_.size());
  }
  for (std::size_t i = begin; i < stages_.size(); ++i) {
    h = stages_[i]->forward(h, latent);
    if (capture) stage_outputs_.push_back(h);
  }
  return h;
}

Tensor Generator::forward(const Tensor& source, const ConditionCodes& codes) {
  const Tensor x = as_chw(source);
  if (x.dim(0) != 1 || x.dim(1) % 4 != 0 || x.dim(2) % 4 != 0) {
    throw ShapeError("generator input must be single-channel with sides divisible by 4, got " +
                     x.shape_string());
  }
  const Tensor latent = map_latent(codes);
  forward_ran_ = true;
  return run_stages(0, x, latent);
}

Tensor Generator::backward(const Tensor& d_output) {
  if (!forward_ran_) throw Error("generator backward called before forward");
  Tensor g = as_chw(d_output);
  Tensor dlatent({spec_.latent_input_dim()});
  for (std::size_t i = stages_.size(); i-- > 0;) {
    g = stages_[i]->backward(g, dlatent);
  }
  if (spec_.use_mapper) mapper_->backward(dlatent);
  return g;
}

Tensor Generator::forward_from(int begin_stage, const Tensor& activation,
                               const ConditionCodes& codes) {
  if (begin_stage < 0 || begin_stage >= static_cast<int>(stages_.size())) {
    throw ConfigError("stage index " + std::to_string(begin_stage) + " out of range");
  }
  const Tensor latent = map_latent(codes);
  return run_stages(static_cast<std::size_t>(begin_stage), as_chw(activation), latent);
}

}  // namespace pfls
