#include "luser/tape.hpp"

#include <algorithm>

namespace luser {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

NoGradScope::NoGradScope() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = prev_; }

EnableGradScope::EnableGradScope() : prev_(g_grad_enabled) {
  g_grad_enabled = true;
}
EnableGradScope::~EnableGradScope() { g_grad_enabled = prev_; }

template <typename T>
void Tape<T>::attach_leaf(Tensor<T>& t) {
  if (t.attached()) throw Error("tensor already attached to a tape");
  t.attach(this, next_id_++);
  max_leaf_id_ = t.tape_id();
  leaf_buffers_.insert(t.buffer_id());
  leaf_sizes_.push_back(t.size());
}

template <typename T>
int Tape<T>::record(TapeNode<T> node, const Tensor<T>& output_value) {
  (void)output_value;
  node.scope = scope_;
  node.output = next_id_++;
  nodes_.push_back(std::move(node));
  return nodes_.back().output;
}

template <typename T>
GradMap<T> Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  return backward_from(loss, Tensor<T>::scalar(T(1)), /*retain=*/false);
}

template <typename T>
GradMap<T> Tape<T>::backward_from(const Tensor<T>& output,
                                  const Tensor<T>& cotangent, bool retain) {
  if (output.tape() != this || output.tape_id() < 0) {
    throw Error("backward_from: output does not live on this tape");
  }
  check_same_shape(output, cotangent, "backward_from");

  GradMap<T> grads(static_cast<std::size_t>(next_id_));
  grads.accumulate(output.tape_id(), cotangent);

  // Ids are assigned in recording order, so a strict reverse walk sees every
  // consumer before its producer.
  NoGradScope no_grad;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const TapeNode<T>& node = *it;
    if (!grads.has(node.output)) continue;
    node.backward(node, grads.at(node.output), grads);
  }
  if (!retain) clear_nodes();
  return grads;
}

template <typename T>
void Tape<T>::clear_nodes() {
  nodes_.clear();
  next_id_ = max_leaf_id_ + 1;
}

template <typename T>
std::size_t Tape<T>::saved_elements() const {
  std::unordered_set<const void*> seen;
  std::size_t total = 0;
  for (const TapeNode<T>& node : nodes_) {
    for (const Tensor<T>& t : node.saved) {
      const void* id = t.buffer_id();
      if (leaf_buffers_.count(id) || seen.count(id)) continue;
      seen.insert(id);
      total += t.size();
    }
    if (node.extra_elements) total += node.extra_elements();
  }
  return total;
}

template <typename T>
std::map<std::string, std::size_t> Tape<T>::saved_elements_by_scope() const {
  std::unordered_set<const void*> seen;
  std::map<std::string, std::size_t> by_scope;
  for (const TapeNode<T>& node : nodes_) {
    std::size_t n = 0;
    for (const Tensor<T>& t : node.saved) {
      const void* id = t.buffer_id();
      if (leaf_buffers_.count(id) || seen.count(id)) continue;
      seen.insert(id);
      n += t.size();
    }
    if (node.extra_elements) n += node.extra_elements();
    by_scope[node.scope] += n;
  }
  return by_scope;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape, std::string label)
    : tape_(tape), prev_(tape.scope_) {
  tape_.scope_ = std::move(label);
}

template <typename T>
Tape<T>::Scope::~Scope() {
  tape_.scope_ = prev_;
}

template <typename T>
RecordedApplication<T>::RecordedApplication(
    std::vector<Tensor<T>> inputs, std::vector<Tensor<T>*> params,
    const std::function<Tensor<T>(std::span<const Tensor<T>>)>& body)
    : inputs_(std::move(inputs)), n_params_(params.size()) {
  for (Tensor<T>& in : inputs_) {
    in.detach_inplace();
    tape_.attach_leaf(in);
  }
  // Re-home the parameters onto the private tape for the recording, then
  // restore their outer attachment.
  std::vector<std::pair<Tape<T>*, int>> outer;
  outer.reserve(params.size());
  for (Tensor<T>* p : params) {
    outer.emplace_back(p->tape(), p->tape_id());
    p->detach_inplace();
    tape_.attach_leaf(*p);
  }
  {
    EnableGradScope grad_on;
    output_ = body(std::span<const Tensor<T>>(inputs_.data(), inputs_.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->attach(outer[i].first, outer[i].second);
  }
  if (output_.tape() != &tape_) {
    throw Error("recorded application produced an unrecorded output");
  }
}

template <typename T>
Tensor<T> RecordedApplication<T>::vjp_state(const Tensor<T>& cotangent) {
  GradMap<T> grads = tape_.backward_from(output_, cotangent, /*retain=*/true);
  return grads.of(inputs_.front());
}

template <typename T>
std::vector<Tensor<T>> RecordedApplication<T>::vjp_all(
    const Tensor<T>& cotangent) {
  GradMap<T> grads = tape_.backward_from(output_, cotangent, /*retain=*/true);
  std::vector<Tensor<T>> out;
  out.reserve(tape_.n_leaves());
  for (std::size_t id = 0; id < tape_.n_leaves(); ++id) {
    if (id < inputs_.size()) {
      out.push_back(grads.of(inputs_[id]));
    } else if (grads.has(static_cast<int>(id))) {
      out.push_back(grads.at(static_cast<int>(id)));
    } else {
      out.push_back(Tensor<T>());
    }
  }
  return out;
}

template <typename T>
std::size_t RecordedApplication<T>::saved_elements() const {
  std::size_t total = tape_.saved_elements();
  // The retained input values (solver state, injection) count as recorded.
  for (const Tensor<T>& in : inputs_) total += in.size();
  return total;
}

template <typename T>
Tensor<T> vjp(const std::function<Tensor<T>(const Tensor<T>&)>& f,
              const Tensor<T>& at, const Tensor<T>& cotangent) {
  RecordedApplication<T> rec(
      {at.detached()}, {},
      [&](std::span<const Tensor<T>> ins) { return f(ins[0]); });
  check_same_shape(rec.output(), cotangent, "vjp cotangent");
  return rec.vjp_state(cotangent);
}

template class GradMap<float>;
template class GradMap<double>;
template class Tape<float>;
template class Tape<double>;
template class RecordedApplication<float>;
template class RecordedApplication<double>;

template Tensor<float> vjp(
    const std::function<Tensor<float>(const Tensor<float>&)>&,
    const Tensor<float>&, const Tensor<float>&);
template Tensor<double> vjp(
    const std::function<Tensor<double>(const Tensor<double>&)>&,
    const Tensor<double>&, const Tensor<double>&);

}  // namespace luser
