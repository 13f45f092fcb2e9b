#include "deftan/model.hpp"

namespace deftan {

int64_t param_count(const ModelConfig& cfg) {
  DeftAn<float> model(cfg, 0);
  return model.param_count();
}

}  // namespace deftan
