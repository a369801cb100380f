#pragma once

#include "clothret/boxes.hpp"
#include "clothret/descriptors.hpp"
#include "clothret/embeddings.hpp"
#include "clothret/error.hpp"
#include "clothret/eval.hpp"
#include "clothret/io.hpp"
#include "clothret/parallel.hpp"
#include "clothret/pipeline.hpp"
#include "clothret/rerank.hpp"
#include "clothret/rng.hpp"
#include "clothret/search.hpp"
#include "clothret/synthetic.hpp"
