#pragma once

#include "overton/ir.hpp"
#include "overton/schema.hpp"

namespace overton {

// Compiles the schema plus one architecture choice into a ModelIR. The graph
// structure follows the schema; the choice only selects encoder blocks and
// dimensions, so the serving signature is invariant across choices.
ModelIR compile(const Schema& schema, const ArchChoice& choice);

// The typed serving interface; depends only on the schema part of the IR.
ServingSignature signature(const ModelIR& ir);

// Deterministic list of `budget` candidates from the effective search space
// (search_space minus pinned keys), seeded by tuning.seed. Sampled without
// replacement when the space has at most `budget` points, with replacement
// otherwise.
std::vector<ArchChoice> enumerate_candidates(const Schema& schema, const TuningSpec& tuning);

// Static shape check: recomputes every node's shape from its inputs and
// compares with the recorded shapes. Throws ShapeError on mismatch.
void check_shapes(const ModelIR& ir);

}  // namespace overton
