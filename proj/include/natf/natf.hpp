#pragma once

#include "natf/aligner.hpp"
#include "natf/autograd.hpp"
#include "natf/bench.hpp"
#include "natf/bleu.hpp"
#include "natf/checkpoint.hpp"
#include "natf/corpus.hpp"
#include "natf/error.hpp"
#include "natf/nat.hpp"
#include "natf/optim.hpp"
#include "natf/rng.hpp"
#include "natf/search.hpp"
#include "natf/synth.hpp"
#include "natf/teacher.hpp"
#include "natf/tensor.hpp"
#include "natf/training.hpp"
#include "natf/transformer.hpp"
#include "natf/vocab.hpp"
