#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "loraseg/data.hpp"
#include "loraseg/model.hpp"

namespace loraseg {

enum class DecayUnit { kEpochs, kSteps };

struct TrainConfig {
    int epochs = 70;
    int batch_size = 8;
    double lr0 = 1e-4;
    double decay_factor = 0.91;
    int decay_every = 5;
    DecayUnit decay_unit = DecayUnit::kEpochs;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float threshold = 0.5f;
    uint64_t seed = 0;
};

// lr0 * decay^floor(t / decay_every); t counts epochs or optimizer steps
// depending on decay_unit.
float lr_at(const TrainConfig& cfg, int64_t t);

// Bias-corrected Adam over the trainable registry slice. Moment state exists
// only for trainable tensors; frozen tensors are never touched.
class AdamOptimizer {
  public:
    AdamOptimizer(std::vector<NamedTensor> params, float beta1, float beta2,
                  float eps);
    void step(float lr);
    int64_t steps_taken() const { return t_; }

  private:
    struct Slot {
        NamedTensor param;
        std::vector<float> m, v;
    };
    std::vector<Slot> slots_;
    float beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

struct Confusion {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion(const uint8_t* pred, const uint8_t* gt, int64_t n);

struct PatchMetrics {
    double iou = 0.0, f1 = 0.0, precision = 0.0, recall = 0.0;
};

// Degenerate conventions: tp+fp+fn == 0 gives IoU = F1 = 1; an undefined
// precision/recall with errors present counts as 0. F1 == 2*IoU/(1+IoU)
// holds for every confusion.
PatchMetrics metrics_from(const Confusion& c);

struct Aggregate {
    double mean = 0.0, stdev = 0.0;  // population standard deviation
};

struct MetricReport {
    std::vector<PatchMetrics> per_patch;
    Aggregate iou, f1, precision, recall;
};

MetricReport evaluate(const SegModel& model,
                      const std::vector<SamplePatch>& patches,
                      const std::vector<int>& idx, float threshold = 0.5f);

struct EpochLog {
    int epoch = 0;
    float lr = 0.0f;
    double train_loss = 0.0;
    double val_iou = 0.0, val_f1 = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double best_val_iou = 0.0;
    int best_epoch = -1;
};

class TrainAbortError : public std::runtime_error {
  public:
    TrainAbortError(int epoch, int batch, float lr);
    int epoch, batch;
    float lr;
};

// Epoch loop with seeded shuffling and batching (last short batch kept).
// Validation runs after every epoch; the best-val-IoU and final checkpoints
// are written when out_dir is non-empty. Aborts with TrainAbortError on a
// non-finite loss.
TrainResult train(SegModel& model, const std::vector<SamplePatch>& patches,
                  const SplitIndices& splits, const TrainConfig& cfg,
                  const std::string& out_dir = "");

void write_train_log(const std::string& path, const std::vector<EpochLog>& log);

}  // namespace loraseg
