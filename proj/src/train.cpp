#include "loraseg/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "loraseg/kernels.hpp"
#include "loraseg/ops.hpp"
#include "loraseg/rng.hpp"

namespace loraseg {

float lr_at(const TrainConfig& cfg, int64_t t) {
    const int64_t stages = t / cfg.decay_every;
    return static_cast<float>(
        cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(stages)));
}

AdamOptimizer::AdamOptimizer(std::vector<NamedTensor> params, float beta1,
                             float beta2, float eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (NamedTensor& p : params) {
        if (!p.tensor.requires_grad())
            throw std::invalid_argument("optimizer given frozen tensor '" +
                                        p.name + "'");
        Slot s;
        s.m.assign(static_cast<size_t>(p.tensor.numel()), 0.0f);
        s.v.assign(static_cast<size_t>(p.tensor.numel()), 0.0f);
        s.param = std::move(p);
        slots_.push_back(std::move(s));
    }
}

void AdamOptimizer::step(float lr) {
    ++t_;
    const float inv_bc1 = static_cast<float>(
        1.0 / (1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_))));
    const float inv_bc2 = static_cast<float>(
        1.0 / (1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_))));
    for (Slot& s : slots_) {
        Tensor& t = s.param.tensor;
        if (!t.has_grad())
            throw std::runtime_error("missing gradient for trainable parameter '" +
                                     s.param.name + "'");
        kernels::active().adam_step(t.data(), t.grad(), s.m.data(), s.v.data(),
                                    t.numel(), lr, beta1_, beta2_, eps_,
                                    inv_bc1, inv_bc2);
    }
}

Confusion confusion(const uint8_t* pred, const uint8_t* gt, int64_t n) {
    Confusion c;
    for (int64_t i = 0; i < n; ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

PatchMetrics metrics_from(const Confusion& c) {
    PatchMetrics m;
    const int64_t denom = c.tp + c.fp + c.fn;
    if (denom == 0) {
        m.iou = m.f1 = m.precision = m.recall = 1.0;
        return m;
    }
    m.iou = static_cast<double>(c.tp) / static_cast<double>(denom);
    m.precision = (c.tp + c.fp) > 0
                      ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp)
                      : 0.0;
    m.recall = (c.tp + c.fn) > 0
                   ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn)
                   : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

namespace {

// Compensated (Kahan) mean plus population standard deviation, so the
// aggregation order cannot shift results beyond f32 noise.
Aggregate aggregate(const std::vector<double>& xs) {
    Aggregate a;
    if (xs.empty()) return a;
    double sum = 0.0, comp = 0.0;
    for (double x : xs) {
        const double y = x - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    a.mean = sum / static_cast<double>(xs.size());
    double var = 0.0;
    comp = 0.0;
    for (double x : xs) {
        const double d = (x - a.mean) * (x - a.mean);
        const double y = d - comp;
        const double t = var + y;
        comp = (t - var) - y;
        var = t;
    }
    a.stdev = std::sqrt(var / static_cast<double>(xs.size()));
    return a;
}

Tensor mask_to_tensor(const std::vector<uint8_t>& mask, int h, int w) {
    std::vector<float> data(mask.size());
    for (size_t i = 0; i < mask.size(); ++i)
        data[i] = static_cast<float>(mask[i]);
    return Tensor::from_data({1, h, w}, std::move(data));
}

}  // namespace

MetricReport evaluate(const SegModel& model,
                      const std::vector<SamplePatch>& patches,
                      const std::vector<int>& idx, float threshold) {
    if (idx.empty())
        throw std::invalid_argument("evaluate called on an empty split");
    MetricReport rep;
    std::vector<double> ious, f1s, ps, rs;
    for (int i : idx) {
        const SamplePatch& p = patches[static_cast<size_t>(i)];
        Tensor logits = model.forward_inference(p.image);
        const std::vector<uint8_t> pred = predict_mask(logits, threshold);
        const PatchMetrics m = metrics_from(
            confusion(pred.data(), p.mask.data(),
                      static_cast<int64_t>(p.mask.size())));
        rep.per_patch.push_back(m);
        ious.push_back(m.iou);
        f1s.push_back(m.f1);
        ps.push_back(m.precision);
        rs.push_back(m.recall);
    }
    rep.iou = aggregate(ious);
    rep.f1 = aggregate(f1s);
    rep.precision = aggregate(ps);
    rep.recall = aggregate(rs);
    return rep;
}

TrainAbortError::TrainAbortError(int epoch_, int batch_, float lr_)
    : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch_) +
                         ", batch " + std::to_string(batch_) + ", lr " +
                         std::to_string(lr_)),
      epoch(epoch_),
      batch(batch_),
      lr(lr_) {}

TrainResult train(SegModel& model, const std::vector<SamplePatch>& patches,
                  const SplitIndices& splits, const TrainConfig& cfg,
                  const std::string& out_dir) {
    if (splits.train.empty())
        throw std::invalid_argument("training split is empty");
    AdamOptimizer opt(model.trainable_params(), cfg.beta1, cfg.beta2, cfg.eps);
    Rng shuffle_rng(Rng::derive(cfg.seed, 17));

    TrainResult result;
    std::vector<int> order = splits.train;
    Tape& tape = model.tape();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t sample_count = 0;
        const int n = static_cast<int>(order.size());
        int batch_index = 0;
        for (int start = 0; start < n; start += cfg.batch_size, ++batch_index) {
            const int bsz = std::min(cfg.batch_size, n - start);
            const float lr = cfg.decay_unit == DecayUnit::kEpochs
                                 ? lr_at(cfg, epoch)
                                 : lr_at(cfg, opt.steps_taken());
            tape.reset();
            Tensor total;
            for (int j = 0; j < bsz; ++j) {
                const SamplePatch& p =
                    patches[static_cast<size_t>(order[static_cast<size_t>(start + j)])];
                Tensor logits = model.forward(&tape, p.image);
                Tensor target =
                    mask_to_tensor(p.mask, logits.dim(1), logits.dim(2));
                Tensor loss = ops::bce_with_logits(&tape, logits, target);
                total = total.defined() ? ops::add(&tape, total, loss) : loss;
            }
            total = ops::scale(&tape, total, 1.0f / static_cast<float>(bsz));
            const float batch_loss = total.item();
            if (!std::isfinite(batch_loss))
                throw TrainAbortError(epoch, batch_index, lr);
            tape.backward(total);
            opt.step(lr);
            loss_sum += static_cast<double>(batch_loss) * bsz;
            sample_count += bsz;
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.lr = cfg.decay_unit == DecayUnit::kEpochs
                       ? lr_at(cfg, epoch)
                       : lr_at(cfg, opt.steps_taken());
        entry.train_loss = loss_sum / static_cast<double>(sample_count);
        const std::vector<int>& val_idx =
            splits.val.empty() ? splits.train : splits.val;
        const MetricReport val = evaluate(model, patches, val_idx, cfg.threshold);
        entry.val_iou = val.iou.mean;
        entry.val_f1 = val.f1.mean;
        result.log.push_back(entry);

        if (result.best_epoch < 0 || entry.val_iou > result.best_val_iou) {
            result.best_val_iou = entry.val_iou;
            result.best_epoch = epoch;
            if (!out_dir.empty())
                model.save_checkpoint(out_dir + "/best.lvwt");
        }
    }
    if (!out_dir.empty()) {
        model.save_checkpoint(out_dir + "/final.lvwt");
        write_train_log(out_dir + "/train_log.tsv", result.log);
    }
    return result;
}

void write_train_log(const std::string& path,
                     const std::vector<EpochLog>& log) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const EpochLog& e : log) {
        char line[160];
        std::snprintf(line, sizeof(line), "%d\t%.8g\t%.8g\t%.6f\t%.6f\n",
                      e.epoch, static_cast<double>(e.lr), e.train_loss,
                      e.val_iou, e.val_f1);
        f << line;
    }
}

}  // namespace loraseg
