#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mhex/data.hpp"
#include "mhex/errors.hpp"
#include "mhex/hosts.hpp"
#include "mhex/mhex_block.hpp"
#include "mhex/rng.hpp"

namespace mhex {

struct TrainOptions {
  LossMode mode = LossMode::finetune;
  int epochs = 5;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  std::function<void(int epoch, const Model&)> on_epoch;  // after each epoch's updates
};

struct EpochLog {
  int epoch = 0;  // 0 is the evaluation before any update
  double loss = 0.0;
  std::vector<double> head_accuracy;  // DS heads in site order, host head last
};

struct TrainLog {
  std::vector<EpochLog> epochs;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    std::size_t heads = epochs.empty() ? 0 : epochs.front().head_accuracy.size();
    os << "epoch,loss";
    for (std::size_t h = 0; h + 1 < heads; ++h) os << ",acc_site" << h;
    if (heads) os << ",acc_final";
    os << '\n';
    for (const auto& e : epochs) {
      os << e.epoch << ',' << e.loss;
      for (double a : e.head_accuracy) os << ',' << a;
      os << '\n';
    }
    return os.str();
  }

  bool operator==(const TrainLog& o) const {
    if (epochs.size() != o.epochs.size()) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i)
      if (epochs[i].epoch != o.epochs[i].epoch || epochs[i].loss != o.epochs[i].loss ||
          epochs[i].head_accuracy != o.epochs[i].head_accuracy)
        return false;
    return true;
  }
};

struct EvalResult {
  double loss = 0.0;
  std::vector<double> head_accuracy;
};

namespace detail {

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct BatchStats {
  double loss = 0.0;
  std::vector<std::size_t> correct;
};

// Forward + backward over examples[idx], accumulating scaled gradients.
inline void accumulate(Model& model, std::span<const Example> data, std::span<const std::size_t> idx, LossMode mode,
                       double scale_by, BatchStats& stats, int epoch) {
  for (auto i : idx) {
    const Example& ex = data[i];
    const ForwardRecord rec = model.forward_collect(ex.input);
    const auto heads = rec.head_logits();
    if (stats.correct.size() < heads.size()) stats.correct.resize(heads.size(), 0);
    for (std::size_t h = 0; h < heads.size(); ++h)
      if (argmax(heads[h].data()) == static_cast<std::size_t>(ex.label)) ++stats.correct[h];
    const Tensor loss = mhex_loss(heads, ex.label, mode);
    if (!std::isfinite(loss.item()))
      throw TrainingDiverged(epoch, "training diverged: non-finite loss in epoch " + std::to_string(epoch));
    stats.loss += loss.item();
    backward(scale(loss, scale_by));
    release_graph(loss);
  }
}

}  // namespace detail

/// Mean loss and per-head accuracy without touching gradients.
inline EvalResult evaluate(const Model& model, std::span<const Example> data, LossMode mode) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  EvalResult r;
  std::vector<std::size_t> correct;
  for (const auto& ex : data) {
    const ForwardRecord rec = model.forward_collect(ex.input);
    const auto heads = rec.head_logits();
    correct.resize(heads.size(), 0);
    for (std::size_t h = 0; h < heads.size(); ++h)
      if (detail::argmax(heads[h].data()) == static_cast<std::size_t>(ex.label)) ++correct[h];
    r.loss += mhex_loss(heads, ex.label, mode).item();
  }
  r.loss /= static_cast<double>(data.size());
  for (auto c : correct) r.head_accuracy.push_back(static_cast<double>(c) / static_cast<double>(data.size()));
  return r;
}

/// AdamW with decoupled weight decay on matrix-shaped parameters.
class AdamW {
 public:
  AdamW(const Model& model, const TrainOptions& opt) : opt_(opt) {
    for (const auto& p : model.params()) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void step(Model& model) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    auto& params = model.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i].tensor;
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      const auto g = p.grad();
      const bool decay = p.rank() >= 2;
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * g[j];
        v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * g[j] * g[j];
        if (decay) w[j] -= opt_.lr * opt_.weight_decay * w[j];
        w[j] -= opt_.lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + opt_.adam_eps);
      }
    }
  }

 private:
  TrainOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

/// Minimizes mhex_loss over `data`. Epoch 0 of the log is the evaluation at
/// initialization; later rows hold running means over each epoch.
inline TrainLog train(Model& model, std::span<const Example> data, const TrainOptions& opt) {
  if (data.empty()) throw ContractError("train: dataset is empty");
  if (opt.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (opt.workers == 0) throw ConfigError("train: workers must be positive");
  TrainLog log;
  {
    const EvalResult init = evaluate(model, data, opt.mode);
    log.epochs.push_back({0, init.loss, init.head_accuracy});
  }
  AdamW optimizer(model, opt);
  std::vector<std::unique_ptr<Model>> replicas;
  for (std::size_t w = 1; w < opt.workers; ++w) replicas.push_back(model.clone());

  std::vector<std::size_t> order(data.size());
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng rng(opt.seed, 0x54524149ULL + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    detail::BatchStats total;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      const double inv = 1.0 / static_cast<double>(batch.size());
      model.zero_grad();
      if (replicas.empty()) {
        detail::accumulate(model, data, batch, opt.mode, inv, total, epoch);
      } else {
        // Contiguous shards; replica gradients are summed in worker order.
        const std::size_t shards = replicas.size() + 1;
        const std::size_t per = (batch.size() + shards - 1) / shards;
        std::vector<detail::BatchStats> stats(shards);
        std::vector<std::exception_ptr> errors(shards);
        std::vector<std::thread> threads;
        for (std::size_t w = 1; w < shards; ++w) {
          replicas[w - 1]->copy_values_from(model);
          replicas[w - 1]->zero_grad();
          const std::size_t b = std::min(batch.size(), w * per), e = std::min(batch.size(), (w + 1) * per);
          threads.emplace_back([&, w, b, e] {
            try {
              detail::accumulate(*replicas[w - 1], data, batch.subspan(b, e - b), opt.mode, inv, stats[w], epoch);
            } catch (...) {
              errors[w] = std::current_exception();
            }
          });
        }
        try {
          detail::accumulate(model, data, batch.subspan(0, std::min(batch.size(), per)), opt.mode, inv, stats[0], epoch);
        } catch (...) {
          errors[0] = std::current_exception();
        }
        for (auto& t : threads) t.join();
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);
        auto& params = model.params();
        for (std::size_t w = 1; w < shards; ++w) {
          const auto& rp = replicas[w - 1]->params();
          for (std::size_t i = 0; i < params.size(); ++i) {
            if (!rp[i].tensor.has_grad()) continue;
            auto g = params[i].tensor.mutable_grad();
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += rp[i].tensor.grad()[j];
          }
        }
        for (const auto& s : stats) {
          total.loss += s.loss;
          if (total.correct.size() < s.correct.size()) total.correct.resize(s.correct.size(), 0);
          for (std::size_t h = 0; h < s.correct.size(); ++h) total.correct[h] += s.correct[h];
        }
      }
      optimizer.step(model);
    }
    model.zero_grad();
    EpochLog row;
    row.epoch = epoch;
    row.loss = total.loss / static_cast<double>(data.size());
    for (auto c : total.correct) row.head_accuracy.push_back(static_cast<double>(c) / static_cast<double>(data.size()));
    log.epochs.push_back(std::move(row));
    if (opt.on_epoch) opt.on_epoch(epoch, model);
  }
  return log;
}

}  // namespace mhex
