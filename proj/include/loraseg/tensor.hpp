#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

namespace loraseg {

// Dense row-major f32 tensor with a trainable flag and an optional gradient
// buffer. Copies are shallow (shared storage); ops produce fresh tensors.
// A tensor with requires_grad == false never owns a gradient buffer.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value,
                       bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar_value(float v, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(p_); }
    const std::vector<int>& shape() const;
    int ndim() const;
    int dim(int i) const;
    int64_t numel() const;
    std::string shape_str() const;

    float* data();
    const float* data() const;
    float item() const;  // scalar tensors only

    bool requires_grad() const;
    void set_requires_grad(bool v);  // disabling drops any grad buffer

    bool has_grad() const;
    float* grad();
    const float* grad() const;
    // Returns the grad buffer, allocating it zero-filled on first use.
    // Only legal on tensors that require grad.
    float* grad_buffer();
    void zero_grad();  // zero in place if a buffer exists
    void drop_grad();

    const void* id() const { return p_.get(); }

  private:
    struct Impl {
        std::vector<int> shape;
        std::vector<float> v;
        std::unique_ptr<std::vector<float>> g;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> p_;
    Impl& impl();
    const Impl& impl() const;
};

std::string shape_to_string(const std::vector<int>& s);
int64_t shape_numel(const std::vector<int>& s);

// Reverse-mode tape. Ops append a backward closure per executed primitive;
// backward() replays them once in reverse and then clears the tape, so a
// second backward without a new forward is an error. Gradients of tensors
// registered as inputs are zero-initialized at the start of each backward
// call and accumulate additively across fan-out.
class Tape {
  public:
    using BackwardFn = std::function<void()>;

    void record(BackwardFn fn, std::initializer_list<Tensor> grad_inputs);
    void record(BackwardFn fn, const std::vector<Tensor>& grad_inputs);
    void backward(const Tensor& loss);
    void reset();
    size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

  private:
    std::vector<BackwardFn> nodes_;
    std::vector<Tensor> grad_inputs_;
    std::unordered_set<const void*> seen_;
};

}  // namespace loraseg
