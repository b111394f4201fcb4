#pragma once

// Small corpus and model configurations for fast end-to-end runs.

#include "aurora/corpus.hpp"
#include "aurora/harness.hpp"
#include "aurora/model.hpp"

namespace fixtures {

inline aurora::corpus::CorpusSpec tiny_spec() {
  aurora::corpus::CorpusSpec s;
  s.n_domains = 2;
  s.series_per_domain = 2;
  s.series_length = 32 * 20;
  s.context_length = 32;
  s.horizon_length = 16;
  s.base_periods = {8, 12};
  return s;
}

inline aurora::model::ModelConfig tiny_model() {
  aurora::model::ModelConfig m;
  m.context_length = 32;
  m.horizon_length = 16;
  m.p_time = 8;
  m.d_time = m.d_image = m.d_text = 8;
  m.heads = 2;
  m.ffn_dim = 16;
  m.encoder_layers = 1;
  m.guided_layers = 1;
  m.K_image = m.K_text = 2;
  m.M = 8;
  m.causal_layers = 1;
  m.cross_layers = 1;
  m.retriever_layers = 1;
  m.flow_layers = 2;
  m.flow_width = 16;
  m.temb_dim = 8;
  m.image_size = 16;
  m.p_image = 8;
  m.n_text_max = 16;
  return m;
}

inline aurora::harness::TrainConfig tiny_train(long steps) {
  aurora::harness::TrainConfig c;
  c.model = tiny_model();
  c.max_steps = steps;
  c.batch_size = 16;
  c.eval_interval = 0;
  return c;
}

}  // namespace fixtures
