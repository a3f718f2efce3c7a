#include "pifs/methods.hpp"

#include <stdexcept>

namespace pifs {

MethodSpec method_from_name(const std::string& name, double lambda) {
    MethodSpec m;
    m.name = name;
    m.lambda = lambda;
    if (name == "ft") {
        m.finetune = true;
    } else if (name == "wi") {
        m.imprint = true;
    } else if (name == "wi_ft") {
        m.imprint = m.finetune = true;
    } else if (name == "wi_ft_pd") {
        m.imprint = m.finetune = true;
        m.distill = DistillVariant::PD;
    } else if (name == "wi_ft_br") {
        m.imprint = m.finetune = true;
        m.norm_mode = NormMode::BatchRenorm;
    } else if (name == "pifs" || name == "wi_ft_br_pd") {
        m.imprint = m.finetune = true;
        m.norm_mode = NormMode::BatchRenorm;
        m.distill = DistillVariant::PD;
    } else if (name == "ft_kd") {
        m.finetune = true;
        m.distill = DistillVariant::KD;
    } else if (name == "ft_l2") {
        m.finetune = true;
        m.distill = DistillVariant::L2;
    } else if (name == "wi_ft_br_kd") {
        m.imprint = m.finetune = true;
        m.norm_mode = NormMode::BatchRenorm;
        m.distill = DistillVariant::KD;
    } else if (name == "wi_ft_br_l2") {
        m.imprint = m.finetune = true;
        m.norm_mode = NormMode::BatchRenorm;
        m.distill = DistillVariant::L2;
    } else {
        throw std::invalid_argument("unknown method '" + name + "'");
    }
    return m;
}

std::vector<std::string> known_method_names() {
    return {"ft",       "ft_kd",       "ft_l2",       "wi",   "wi_ft",
            "wi_ft_pd", "wi_ft_br",    "wi_ft_br_kd", "wi_ft_br_l2", "pifs"};
}

std::vector<std::string> ablation_method_order() {
    return {"ft",       "ft_kd",    "ft_l2",       "wi",          "wi_ft",
            "wi_ft_pd", "wi_ft_br", "wi_ft_br_kd", "wi_ft_br_l2", "pifs"};
}

}  // namespace pifs
