#pragma once

#include <string>
#include <vector>

#include "pifs/nn.hpp"
#include "pifs/protolearn.hpp"

namespace pifs {

/// A named recipe for the few-shot learning steps: how new prototypes are
/// initialized, whether the network fine-tunes, which normalization runs,
/// and which distillation term (if any) regularizes the training.
struct MethodSpec {
    std::string name;
    bool imprint = false;   // MAP-initialized new columns (vs random)
    bool finetune = false;  // end-to-end training in FSL steps
    NormMode norm_mode = NormMode::BatchNorm;
    DistillVariant distill = DistillVariant::None;
    double lambda = 10.0;
};

/// Throws on unknown names. `pifs` is the alias of wi_ft_br_pd.
MethodSpec method_from_name(const std::string& name, double lambda = 10.0);

std::vector<std::string> known_method_names();

/// The fixed ablation matrix, in presentation order.
std::vector<std::string> ablation_method_order();

}  // namespace pifs
