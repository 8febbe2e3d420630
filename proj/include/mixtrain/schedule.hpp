#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixtrain/nn.hpp"

namespace mixtrain {

enum class Method { sl, ssl_sl, mixtraining };
enum class Phase { ssl, mix, sl };

std::string to_string(Method method);
std::string to_string(Phase phase);
Method parse_method(const std::string& text);

struct TrainConfig {
  std::size_t e_ssl = 20;
  std::size_t e_sl = 20;
  double rho = 0.5;     // mix ratio
  double alpha = 0.5;   // weight of the reconstruction loss
  double lambda = 0.5;  // mixing weight of supervised images
  double p = 1.0;       // data fraction
  std::size_t batch_size = 128;
  double base_lr_ssl = 1.5e-4;
  double base_lr_sl = 1e-3;
  // Unset means ceil(20 * e_ssl / 100) and ceil(5 * e_sl / 100).
  std::optional<std::size_t> warmup_ssl;
  std::optional<std::size_t> warmup_sl;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  Method method = Method::mixtraining;
  LossTarget loss_target = LossTarget::masked;
  bool head_parallel = false;

  std::size_t effective_warmup_ssl() const;
  std::size_t effective_warmup_sl() const;
  void validate() const;  // throws ConfigError
};

struct PhaseSpan {
  Phase phase;
  std::size_t length;
};

struct PhaseSchedule {
  std::size_t e_mix = 0;
  std::size_t pure_ssl_epochs = 0;
  std::size_t pure_sl_epochs = 0;
  std::size_t total_epochs = 0;

  // Non-empty phases in execution order.
  std::vector<PhaseSpan> spans() const;
};

// e_mix = floor(rho * min(e_ssl, e_sl)) for mixtraining, 0 for the
// baselines; method sl runs only the supervised phase.
PhaseSchedule plan(const TrainConfig& cfg);

// Linear warmup base*(e+1)/W for e < W, then base*(1+cos(pi*(e-W)/(L-W)))/2.
double warmup_cosine(double base, std::size_t warmup, std::size_t epoch, std::size_t length);

// Warmup epochs actually used by a phase of the given length. The mix phase
// scales the SSL warmup by length / e_ssl.
std::size_t phase_warmup(Phase phase, std::size_t phase_len, const TrainConfig& cfg);

double lr_at(Phase phase, std::size_t epoch_in_phase, std::size_t phase_len, const TrainConfig& cfg);

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// One decoupled-decay Adam update of a single tensor; `step` is the
// 1-based count used for bias correction.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t step,
                  double lr, const AdamWHyper& hyper, bool decay);

/// Moments and step counts for every parameter of a model, indexed in
/// the model's stable parameter order.
template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const std::vector<NamedParameter<T>>& params, AdamWHyper hyper);

  // Updates every parameter that holds a gradient. A non-finite gradient
  // throws TrainingAbort naming the parameter (epoch -1; the caller adds
  // context).
  void step(const std::vector<NamedParameter<T>>& params, double lr);
  void reset();  // zero moments and step counts

  const AdamWHyper& hyper() const { return hyper_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  std::vector<std::uint64_t>& steps() { return steps_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  const std::vector<std::uint64_t>& steps() const { return steps_; }

 private:
  AdamWHyper hyper_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::vector<std::uint64_t> steps_;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace mixtrain
