#include <cstdio>
#include "sparseformer/gradsuite.hpp"
#include "sparseformer/model.hpp"

int main() {
  auto cfg = spf::micro_model_config();
  auto w = spf::init_model<float>(cfg, 1);
  spf::Tensor<float> img({3, 8, 8}, 0.1f);
  spf::ForwardCtx<float> ctx;
  auto logits = spf::forward(img, w, ctx);
  std::printf("logits[0]=%f n=%lld\n", (double)logits.data()[0], logits.numel());
  return 0;
}
