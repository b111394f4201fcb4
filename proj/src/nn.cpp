#include "aurora/nn.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace aurora::nn {

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  for (std::uint64_t k : keys) h = mix(h ^ mix(k + 0x632be59bd9b4e019ULL));
  return h;
}

Matrix randn(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void round_to_float(Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

Parameter& ParameterStore::create(const std::string& name, Matrix init) {
  if (index_.count(name) != 0) throw std::invalid_argument("duplicate parameter name: " + name);
  round_to_float(init);
  params_.push_back(Parameter{name, std::move(init), Matrix()});
  Parameter& p = params_.back();
  p.zero_grad();
  index_[name] = &p;
  return p;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : it->second;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (p == nullptr) throw std::out_of_range("unknown parameter: " + name);
  return *p;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const Parameter& p : params_) out.push_back(&p);
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

Linear Linear::create(ParameterStore& store, const std::string& name, int in, int out, bool with_bias, Rng& rng,
                      double gain) {
  Linear l;
  l.weight = &store.create(name + ".weight", randn(in, out, gain / std::sqrt(static_cast<double>(in)), rng));
  if (with_bias) l.bias = &store.create(name + ".bias", Matrix::Zero(1, out));
  return l;
}

Linear Linear::zeros(ParameterStore& store, const std::string& name, int in, int out, bool with_bias) {
  Linear l;
  l.weight = &store.create(name + ".weight", Matrix::Zero(in, out));
  if (with_bias) l.bias = &store.create(name + ".bias", Matrix::Zero(1, out));
  return l;
}

Var Linear::operator()(Graph& g, const Var& x) const {
  Var y = ad::matmul(x, g.param(*weight));
  if (bias != nullptr) y = ad::add_row(y, g.param(*bias));
  return y;
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, int dim) {
  LayerNorm ln;
  ln.gain = &store.create(name + ".gain", Matrix::Ones(1, dim));
  ln.bias = &store.create(name + ".bias", Matrix::Zero(1, dim));
  return ln;
}

Var LayerNorm::operator()(Graph& g, const Var& x) const {
  Var gv = g.param(*gain);
  Var bv = g.param(*bias);
  return ad::layer_norm(x, &gv, &bv);
}

FeedForward FeedForward::create(ParameterStore& store, const std::string& name, int dim, int hidden, Rng& rng) {
  return FeedForward{Linear::create(store, name + ".up", dim, hidden, true, rng),
                     Linear::create(store, name + ".down", hidden, dim, true, rng)};
}

Var FeedForward::operator()(Graph& g, const Var& x) const { return down(g, ad::gelu(up(g, x))); }

MultiHeadAttention MultiHeadAttention::create(ParameterStore& store, const std::string& name, int d_model, int d_kv,
                                              int heads, Rng& rng) {
  if (heads <= 0 || d_model % heads != 0) throw std::invalid_argument(name + ": width not divisible by heads");
  MultiHeadAttention m;
  m.q = Linear::create(store, name + ".q", d_model, d_model, false, rng);
  m.k = Linear::create(store, name + ".k", d_kv, d_model, false, rng);
  m.v = Linear::create(store, name + ".v", d_kv, d_model, false, rng);
  m.o = Linear::create(store, name + ".o", d_model, d_model, false, rng);
  m.heads = heads;
  return m;
}

Var MultiHeadAttention::operator()(Graph& g, const Var& xq, const Var& xkv, const AttentionCall& call) const {
  Var qv = q(g, xq);
  Var kv = k(g, xkv);
  Var vv = v(g, xkv);
  if (!call.q_positions.empty()) qv = ad::rope(qv, call.q_positions, heads);
  if (!call.k_positions.empty()) kv = ad::rope(kv, call.k_positions, heads);
  ad::AttentionSpec spec;
  spec.batch = call.batch;
  spec.nq = call.nq;
  spec.nk = call.nk;
  spec.heads = heads;
  spec.scale = call.scale.value_or(1.0 / std::sqrt(static_cast<double>(qv.cols() / heads)));
  spec.causal = call.causal;
  spec.key_mask = call.key_mask;
  spec.bias = call.bias;
  spec.weights_out = call.weights_out;
  return o(g, ad::attention(qv, kv, vv, spec));
}

TransformerBlock TransformerBlock::create(ParameterStore& store, const std::string& name, int dim, int heads,
                                          int ffn_dim, Rng& rng) {
  TransformerBlock b;
  b.ln_attn = LayerNorm::create(store, name + ".ln_attn", dim);
  b.attn = MultiHeadAttention::create(store, name + ".attn", dim, dim, heads, rng);
  b.ln_ffn = LayerNorm::create(store, name + ".ln_ffn", dim);
  b.ffn = FeedForward::create(store, name + ".ffn", dim, ffn_dim, rng);
  return b;
}

Var TransformerBlock::self_attend(Graph& g, const Var& x, int batch, int n, bool causal,
                                  const std::vector<std::uint8_t>& key_mask) const {
  AttentionCall call;
  call.batch = batch;
  call.nq = n;
  call.nk = n;
  call.causal = causal;
  call.key_mask = key_mask;
  Var h = ln_attn(g, x);
  Var y = ad::add(x, attn(g, h, h, call));
  return ad::add(y, ffn(g, ln_ffn(g, y)));
}

CrossBlock CrossBlock::create(ParameterStore& store, const std::string& name, int dim, int heads, int ffn_dim,
                              Rng& rng) {
  CrossBlock b;
  b.ln_q = LayerNorm::create(store, name + ".ln_q", dim);
  b.ln_kv = LayerNorm::create(store, name + ".ln_kv", dim);
  b.attn = MultiHeadAttention::create(store, name + ".attn", dim, dim, heads, rng);
  b.ln_ffn = LayerNorm::create(store, name + ".ln_ffn", dim);
  b.ffn = FeedForward::create(store, name + ".ffn", dim, ffn_dim, rng);
  return b;
}

Var CrossBlock::attend(Graph& g, const Var& x, const Var& memory, int batch, int nq, int nk,
                       const std::vector<int>& q_positions, const std::vector<int>& k_positions) const {
  AttentionCall call;
  call.batch = batch;
  call.nq = nq;
  call.nk = nk;
  call.q_positions = q_positions;
  call.k_positions = k_positions;
  Var y = ad::add(x, attn(g, ln_q(g, x), ln_kv(g, memory), call));
  return ad::add(y, ffn(g, ln_ffn(g, y)));
}

Matrix sinusoidal_embedding(const std::vector<double>& positions, int dim, double max_period) {
  Matrix out(static_cast<Eigen::Index>(positions.size()), dim);
  const int half = dim / 2;
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(max_period, -static_cast<double>(i) / static_cast<double>(half));
      out(static_cast<Eigen::Index>(r), 2 * i) = std::sin(positions[r] * freq);
      out(static_cast<Eigen::Index>(r), 2 * i + 1) = std::cos(positions[r] * freq);
    }
    if (dim % 2 == 1) out(static_cast<Eigen::Index>(r), dim - 1) = 0.0;
  }
  return out;
}

void AdamW::step(ParameterStore& store, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (Parameter* p : store.all()) {
    Moments& st = state_[p->name];
    if (st.m.size() == 0) {
      st.m.setZero(p->value.rows(), p->value.cols());
      st.v.setZero(p->value.rows(), p->value.cols());
    }
    st.m = opt_.beta1 * st.m + (1.0 - opt_.beta1) * p->grad;
    st.v = opt_.beta2 * st.v + (1.0 - opt_.beta2) * p->grad.cwiseAbs2();
    if (p->value.rows() > 1 && opt_.weight_decay > 0.0) p->value *= (1.0 - lr * opt_.weight_decay);
    p->value.array() -= lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + opt_.eps);
    round_to_float(p->value);
  }
}

double step_lr(double base, double decay, int step_epochs, long epoch) {
  if (step_epochs <= 0) return base;
  return base * std::pow(decay, static_cast<double>(epoch / step_epochs));
}

}  // namespace aurora::nn
