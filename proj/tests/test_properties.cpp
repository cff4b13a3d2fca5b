#include <gtest/gtest.h>

#include "properties.hpp"

#define MRIS_PROPERTY(Name, fn)                                                               \
  TEST(Property, Name) {                                                                      \
    const auto r = props::fn();                                                               \
    EXPECT_TRUE(r.ok) << r.name << ": " << r.detail;                                          \
  }

MRIS_PROPERTY(CosineDistance, cosine_distance_props)
MRIS_PROPERTY(TripletLoss, triplet_loss_props)
MRIS_PROPERTY(Knn, knn_props)
MRIS_PROPERTY(Synthesis, synthesis_props)
MRIS_PROPERTY(Recall, recall_props)
MRIS_PROPERTY(MedianMad, median_mad_props)
MRIS_PROPERTY(Gradients, gradient_props)
MRIS_PROPERTY(Numerics, numerics_props)
MRIS_PROPERTY(TargetScale, target_scale_props)
MRIS_PROPERTY(BatchPlan, batch_plan_props)
MRIS_PROPERTY(Persistence, persistence_props)
MRIS_PROPERTY(Determinism, determinism_props)
