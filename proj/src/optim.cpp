#include "steermoe/optim.hpp"

#include <cmath>

#include "steermoe/errors.hpp"

namespace steermoe {

double OptimSpec::lr_for(LrGroup g) const {
  switch (g) {
    case LrGroup::base: return lr_base;
    case LrGroup::steering_vectors: return lr_steering_vectors;
    case LrGroup::router: return lr_router;
  }
  return lr_base;
}

void OptimSpec::validate() const {
  if (!(lr_base > 0) || !(lr_steering_vectors > 0) || !(lr_router > 0)) {
    throw FormatError("optim.lr_*: learning rates must be positive");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw FormatError("optim.beta1/beta2: must lie in [0, 1)");
  if (!(eps > 0)) throw FormatError("optim.eps: must be positive");
  if (!(weight_decay >= 0)) throw FormatError("optim.weight_decay: must be >= 0");
  if (batch_size < 1) throw FormatError("optim.batch_size: must be >= 1");
  if (max_steps < 0) throw FormatError("optim.max_steps: must be >= 0");
  if (eval_interval < 1) throw FormatError("optim.eval_interval: must be >= 1");
}

void to_json(nlohmann::json& j, const OptimSpec& s) {
  j = nlohmann::json{{"lr_base", s.lr_base},
                     {"lr_steering_vectors", s.lr_steering_vectors},
                     {"lr_router", s.lr_router},
                     {"beta1", s.beta1},
                     {"beta2", s.beta2},
                     {"eps", s.eps},
                     {"weight_decay", s.weight_decay},
                     {"clip_norm", s.clip_norm},
                     {"batch_size", s.batch_size},
                     {"max_steps", s.max_steps},
                     {"eval_interval", s.eval_interval},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, OptimSpec& s) {
  s.lr_base = j.at("lr_base").get<double>();
  s.lr_steering_vectors = j.at("lr_steering_vectors").get<double>();
  s.lr_router = j.at("lr_router").get<double>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  s.weight_decay = j.at("weight_decay").get<double>();
  s.clip_norm = j.at("clip_norm").get<double>();
  s.batch_size = j.at("batch_size").get<int>();
  s.max_steps = j.at("max_steps").get<int>();
  s.eval_interval = j.at("eval_interval").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

AdamW::AdamW(OptimSpec spec) : spec_(spec) { spec_.validate(); }

GroupNorms AdamW::step(const ParameterRefs& params, int step) {
  if (step < 1) throw ContractError("AdamW::step: step is 1-based");
  GroupNorms sq{0.0, 0.0, 0.0};
  for (const Parameter* p : params) {
    if (!p->trainable || !p->grad) continue;
    if (!p->grad->allFinite()) throw NumericalError("non-finite gradient in parameter " + p->name);
    sq[static_cast<size_t>(p->lr_group)] += p->grad->squaredNorm();
  }
  const double total = std::sqrt(sq[0] + sq[1] + sq[2]);
  const double clip = (spec_.clip_norm > 0 && total > spec_.clip_norm) ? spec_.clip_norm / total : 1.0;

  const double bc1 = 1.0 - std::pow(spec_.beta1, step);
  const double bc2 = 1.0 - std::pow(spec_.beta2, step);
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    Matrix& w = p->value.matrix();
    auto [it, fresh] = moments_.try_emplace(p->name);
    Moments& mom = it->second;
    if (fresh) {
      mom.m = Matrix::Zero(w.rows(), w.cols());
      mom.v = Matrix::Zero(w.rows(), w.cols());
    }
    const double lr = spec_.lr_for(p->lr_group);
    if (p->grad) {
      const Matrix g = clip * *p->grad;
      mom.m = spec_.beta1 * mom.m + (1.0 - spec_.beta1) * g;
      mom.v = spec_.beta2 * mom.v + (1.0 - spec_.beta2) * g.cwiseProduct(g);
    } else {
      mom.m *= spec_.beta1;
      mom.v *= spec_.beta2;
    }
    if (p->weight_decay && spec_.weight_decay > 0) w *= 1.0 - lr * spec_.weight_decay;
    w.array() -= lr * (mom.m.array() / bc1) / ((mom.v.array() / bc2).sqrt() + spec_.eps);
    p->zero_grad();
  }
  return {std::sqrt(sq[0]), std::sqrt(sq[1]), std::sqrt(sq[2])};
}

}  // namespace steermoe
