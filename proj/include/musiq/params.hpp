#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "musiq/graph.hpp"
#include "musiq/rng.hpp"
#include "musiq/tensor.hpp"

namespace musiq {

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

enum class Init { Zeros, Ones, TruncNormal02 };

// Named trainable tensors in a stable creation order. The order defines the
// checkpoint tensor index and the optimizer sweep, so it must be a pure
// function of the model configuration.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  Tensor<T>& create(const std::string& name, Shape shape, Init init, Rng& rng) {
    if (index_.count(name)) throw Error("duplicate parameter name: " + name);
    Tensor<T> t(shape);
    switch (init) {
      case Init::Zeros:
        break;
      case Init::Ones:
        std::fill(t.data(), t.data() + t.numel(), T(1));
        break;
      case Init::TruncNormal02:
        for (int64_t i = 0; i < t.numel(); ++i)
          t[i] = static_cast<T>(rng.truncated_normal(0.02));
        break;
    }
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(t)});
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return entries_[it->second].value;
  }

  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const Entry& e : entries_) n += e.value.numel();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const Entry& e : entries_) out.adopt(e.name, e.value.template cast<U>());
    return out;
  }

  // Insert a pre-built tensor (checkpoint loading, dtype conversion).
  void adopt(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw Error("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(value)});
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Per-pass binding of parameters to graph leaves. `use` memoizes so each
// parameter appears once per tape; collect() maps accumulated node gradients
// back to names, zero-filling parameters the pass never touched.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(Graph<T>& g, ParamStore<T>& store) : g_(&g), store_(&store) {}

  Var<T> use(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return {g_, it->second};
    int id = g_->add_leaf(store_->at(name));
    bound_[name] = id;
    return {g_, id};
  }

  Gradients<T> collect() const {
    Gradients<T> out;
    for (const auto& e : store_->entries()) {
      auto it = bound_.find(e.name);
      if (it != bound_.end() && g_->has_grad(it->second))
        out[e.name] = const_cast<Graph<T>*>(g_)->grad(it->second);
      else
        out[e.name] = Tensor<T>::zeros(e.value.shape());
    }
    return out;
  }

 private:
  Graph<T>* g_;
  ParamStore<T>* store_;
  std::unordered_map<std::string, int> bound_;
};

template <typename T>
void gradients_accumulate(Gradients<T>& acc, const Gradients<T>& g) {
  if (acc.empty()) {
    for (const auto& [k, v] : g) acc[k] = v.clone();
    return;
  }
  for (const auto& [k, v] : g) {
    auto it = acc.find(k);
    if (it == acc.end()) throw Error("gradient accumulate: unknown key " + k);
    for (int64_t i = 0; i < v.numel(); ++i) it->second[i] += v[i];
  }
}

template <typename T>
void gradients_scale(Gradients<T>& g, T s) {
  for (auto& [k, v] : g)
    for (int64_t i = 0; i < v.numel(); ++i) v[i] *= s;
}

}  // namespace musiq
