#include "loraseg/tensor.hpp"

#include <cstring>
#include <sstream>
#include <stdexcept>

#include "loraseg/kernels.hpp"

namespace loraseg {

int64_t shape_numel(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_to_string(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

static void check_shape(const std::vector<int>& shape) {
    if (shape.empty())
        throw std::invalid_argument("tensor shape must have at least one dim");
    for (int d : shape) {
        if (d <= 0)
            throw std::invalid_argument("tensor dims must be positive, got " +
                                        shape_to_string(shape));
    }
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    check_shape(shape);
    Tensor t;
    t.p_ = std::make_shared<Impl>();
    t.p_->v.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    t.p_->shape = std::move(shape);
    t.p_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.p_->v.begin(), t.p_->v.end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data,
                         bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw std::invalid_argument(
            "data length " + std::to_string(data.size()) +
            " does not match shape " + shape_to_string(shape));
    Tensor t;
    t.p_ = std::make_shared<Impl>();
    t.p_->shape = std::move(shape);
    t.p_->v = std::move(data);
    t.p_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar_value(float v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor::Impl& Tensor::impl() {
    if (!p_) throw std::runtime_error("use of undefined tensor");
    return *p_;
}

const Tensor::Impl& Tensor::impl() const {
    if (!p_) throw std::runtime_error("use of undefined tensor");
    return *p_;
}

const std::vector<int>& Tensor::shape() const { return impl().shape; }
int Tensor::ndim() const { return static_cast<int>(impl().shape.size()); }

int Tensor::dim(int i) const {
    const auto& s = impl().shape;
    if (i < 0) i += static_cast<int>(s.size());
    return s.at(static_cast<size_t>(i));
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl().v.size()); }
std::string Tensor::shape_str() const { return shape_to_string(impl().shape); }

float* Tensor::data() { return impl().v.data(); }
const float* Tensor::data() const { return impl().v.data(); }

float Tensor::item() const {
    if (numel() != 1)
        throw std::runtime_error("item() on non-scalar tensor " + shape_str());
    return impl().v[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool v) {
    impl().requires_grad = v;
    if (!v) impl().g.reset();
}

bool Tensor::has_grad() const { return impl().g != nullptr; }

float* Tensor::grad() {
    if (!has_grad()) throw std::runtime_error("tensor has no gradient buffer");
    return impl().g->data();
}

const float* Tensor::grad() const {
    if (!has_grad()) throw std::runtime_error("tensor has no gradient buffer");
    return impl().g->data();
}

float* Tensor::grad_buffer() {
    Impl& im = impl();
    if (!im.requires_grad)
        throw std::runtime_error(
            "gradient requested for a tensor with requires_grad == false");
    if (!im.g) im.g = std::make_unique<std::vector<float>>(im.v.size(), 0.0f);
    return im.g->data();
}

void Tensor::zero_grad() {
    Impl& im = impl();
    if (im.g) std::fill(im.g->begin(), im.g->end(), 0.0f);
}

void Tensor::drop_grad() { impl().g.reset(); }

void Tape::record(BackwardFn fn, std::initializer_list<Tensor> grad_inputs) {
    nodes_.push_back(std::move(fn));
    for (const Tensor& t : grad_inputs) {
        if (!t.defined() || !t.requires_grad()) continue;
        if (seen_.insert(t.id()).second) grad_inputs_.push_back(t);
    }
}

void Tape::record(BackwardFn fn, const std::vector<Tensor>& grad_inputs) {
    nodes_.push_back(std::move(fn));
    for (const Tensor& t : grad_inputs) {
        if (!t.defined() || !t.requires_grad()) continue;
        if (seen_.insert(t.id()).second) grad_inputs_.push_back(t);
    }
}

void Tape::backward(const Tensor& loss) {
    if (nodes_.empty())
        throw std::runtime_error(
            "backward on an empty tape (no forward recorded, or the tape was "
            "already consumed by a previous backward)");
    if (loss.numel() != 1)
        throw std::runtime_error("backward requires a scalar loss, got " +
                                 loss.shape_str());
    if (!loss.requires_grad())
        throw std::runtime_error(
            "loss does not depend on any tensor that requires grad");

    for (Tensor& t : grad_inputs_) t.zero_grad();
    Tensor seed = loss;
    seed.grad_buffer()[0] = 1.0f;

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    reset();
}

void Tape::reset() {
    nodes_.clear();
    grad_inputs_.clear();
    seen_.clear();
}

}  // namespace loraseg
