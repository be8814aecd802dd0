#pragma once

// Small cohorts and encoders that keep pipeline tests fast.

#include "comprer/model.hpp"
#include "comprer/synthdata.hpp"
#include "comprer/training.hpp"

namespace testing {

inline comprer::GeneratorConfig tiny_generator(std::size_t n = 40) {
  comprer::GeneratorConfig c;
  c.n_participants = n;
  c.image_size = 8;
  c.second_visit_fraction = 0.5;
  c.missing_probability = 0.1;
  return c;
}

inline comprer::EncoderConfig tiny_encoder() {
  comprer::EncoderConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.mlp_hidden = 8;
  c.proj_dim = 4;
  c.pred_hidden = 4;
  c.decoder_channels = {2, 2};
  return c;
}

inline comprer::TrainConfig tiny_train(std::size_t steps = 20) {
  comprer::TrainConfig c;
  c.batch_size = 4;
  c.steps = steps;
  c.lr = 1e-3;
  c.eval_every = 0;
  c.eval_k = {1, 2};
  c.seed = 5;
  return c;
}

// Every stream supplied, drawn from the scheduler of a cohort's train split.
inline comprer::StepBatches full_step(const std::vector<comprer::CohortSample>& samples, std::size_t batch,
                                      std::uint64_t seed) {
  comprer::StreamScheduler sched(samples, batch, seed);
  return sched.next_step();
}

}  // namespace testing
