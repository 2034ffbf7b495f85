#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "luser/tensor.hpp"

namespace luser {

/// Thread-local switch controlling whether ops record onto tapes.
/// Fixed-point solver loops run inside NoGradScope by construction, so the
/// equilibrium forward iteration stores nothing.
class GradMode {
 public:
  static bool enabled();
  static void set(bool on);
};

struct NoGradScope {
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool prev_;
};

struct EnableGradScope {
  EnableGradScope();
  ~EnableGradScope();
  EnableGradScope(const EnableGradScope&) = delete;
  EnableGradScope& operator=(const EnableGradScope&) = delete;

 private:
  bool prev_;
};

/// Gradients keyed by tape variable id. Leaf gradients start at zero and are
/// add-accumulated during the reverse sweep.
template <typename T>
class GradMap {
 public:
  GradMap() = default;
  explicit GradMap(std::size_t n) : grads_(n) {}

  bool has(int id) const {
    return id >= 0 && static_cast<std::size_t>(id) < grads_.size() &&
           !grads_[static_cast<std::size_t>(id)].empty();
  }
  const Tensor<T>& at(int id) const { return grads_.at(static_cast<std::size_t>(id)); }

  /// Gradient of a leaf tensor; zeros of matching shape if untouched.
  Tensor<T> of(const Tensor<T>& leaf) const {
    if (!leaf.attached()) throw Error("grad of detached tensor");
    if (has(leaf.tape_id())) return at(leaf.tape_id());
    return Tensor<T>::zeros(leaf.shape());
  }

  void accumulate(int id, const Tensor<T>& g) {
    if (id < 0) return;
    if (static_cast<std::size_t>(id) >= grads_.size()) grads_.resize(id + 1);
    Tensor<T>& slot = grads_[static_cast<std::size_t>(id)];
    if (slot.empty()) {
      slot = g;
    } else {
      slot.add_inplace(g);
    }
  }

  std::size_t capacity() const { return grads_.size(); }

 private:
  std::vector<Tensor<T>> grads_;
};

/// One recorded primitive operation: op kind, input/output handles, the
/// values saved for backward, and the backward function itself. Replaying
/// backward visits records in exact reverse order of recording.
template <typename T>
struct TapeNode {
  const char* op = "";
  std::string scope;
  std::vector<int> inputs;
  int output = -1;
  std::vector<Tensor<T>> saved;
  /// Accumulates input gradients given the output gradient.
  std::function<void(const TapeNode<T>&, const Tensor<T>&, GradMap<T>&)> backward;
  /// Additional recorded elements owned by composite nodes (e.g. the single
  /// retained application inside an equilibrium block).
  std::function<std::size_t()> extra_elements;
};

/// Reverse-mode differentiation tape. Leaves are registered once and keep
/// stable ids; each forward pass appends nodes which backward() consumes.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `t` as a leaf parameter/input of this tape (in place).
  void attach_leaf(Tensor<T>& t);

  int record(TapeNode<T> node, const Tensor<T>& output_value);

  bool recording() const { return GradMode::enabled(); }

  /// Reverse sweep from a scalar loss. Consumes the recorded nodes; leaves
  /// stay registered. Throws on a non-scalar loss.
  GradMap<T> backward(const Tensor<T>& loss);

  /// Reverse sweep seeding `cotangent` at `output`. With retain=true the
  /// nodes are kept so the sweep can be replayed with other cotangents.
  GradMap<T> backward_from(const Tensor<T>& output, const Tensor<T>& cotangent,
                           bool retain = false);

  void clear_nodes();

  std::size_t n_leaves() const { return leaf_buffers_.size(); }
  std::size_t n_nodes() const { return nodes_.size(); }

  /// Total elements saved for backward across live nodes. Buffers are
  /// deduplicated and leaf buffers (parameter values) are excluded, so this
  /// counts genuinely recorded activations.
  std::size_t saved_elements() const;
  std::map<std::string, std::size_t> saved_elements_by_scope() const;

  /// RAII label applied to nodes recorded while alive (per-stage accounting).
  class Scope {
   public:
    Scope(Tape& tape, std::string label);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape& tape_;
    std::string prev_;
  };

  const std::string& current_scope() const { return scope_; }

 private:
  int next_id_ = 0;
  int max_leaf_id_ = -1;
  std::vector<TapeNode<T>> nodes_;
  std::unordered_set<const void*> leaf_buffers_;
  std::vector<std::size_t> leaf_sizes_;
  std::string scope_;
};

/// Records one application `out = body(inputs)` of a function whose
/// parameters live on an outer tape, onto a private tape that can be swept
/// repeatedly with different cotangents (the building block for
/// vector-Jacobian products and the implicit backward solve).
template <typename T>
class RecordedApplication {
 public:
  /// `inputs` are leaf values (first one is the solver state by convention);
  /// `params` are re-attached to the private tape for the duration of the
  /// recording and restored afterwards.
  RecordedApplication(
      std::vector<Tensor<T>> inputs, std::vector<Tensor<T>*> params,
      const std::function<Tensor<T>(std::span<const Tensor<T>>)>& body);

  const Tensor<T>& output() const { return output_; }

  /// J^T * cotangent with respect to the first input only.
  Tensor<T> vjp_state(const Tensor<T>& cotangent);

  /// Gradients for all inputs followed by all params, in registration order.
  std::vector<Tensor<T>> vjp_all(const Tensor<T>& cotangent);

  std::size_t n_inputs() const { return inputs_.size(); }
  std::size_t n_params() const { return n_params_; }

  /// Recorded elements held by this application (activations plus the
  /// retained input values; outer parameters excluded).
  std::size_t saved_elements() const;

 private:
  Tape<T> tape_;
  std::vector<Tensor<T>> inputs_;
  std::size_t n_params_ = 0;
  Tensor<T> output_;
};

/// J^T * cotangent of a single-input function at `at`; the recording is
/// local and not retained.
template <typename T>
Tensor<T> vjp(const std::function<Tensor<T>(const Tensor<T>&)>& f,
              const Tensor<T>& at, const Tensor<T>& cotangent);

extern template class GradMap<float>;
extern template class GradMap<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template class RecordedApplication<float>;
extern template class RecordedApplication<double>;

}  // namespace luser
