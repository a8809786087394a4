#pragma once

// Deterministic stand-in for a diffusion service: blends the render toward
// the exact oracle render, more strongly at higher noise levels.

#include "sketch3d/dataset.hpp"
#include "sketch3d/guidance.hpp"

#include <cmath>

namespace sketch3d {

/// Generated = (1 - s) * rendered + s * oracle(pose), s = sqrt(1 - alpha_bar(t)).
inline GuidanceResponse mock_generate(const GuidanceRequest& req, const OracleScene& oracle,
                                      const NoiseSchedule& schedule,
                                      const SketchDataset* dataset = nullptr) {
  req.validate();
  std::optional<CameraPose> pose = req.pose;
  if (!pose && req.pose_id && dataset)
    if (const auto* v = dataset->find(*req.pose_id)) pose = v->pose;
  if (!pose) throw GuidanceError("mock guidance: cannot resolve the request pose");
  if (pose->width != req.rendered_image.width || pose->height != req.rendered_image.height)
    throw GuidanceError("mock guidance: pose resolution differs from the rendered image");
  const Image target = oracle.render(*pose, req.background);
  const double s = std::sqrt(1.0 - schedule.alpha_bar(req.noise_level));
  GuidanceResponse resp;
  resp.generated_image = req.rendered_image;
  for (std::size_t i = 0; i < target.size(); ++i)
    resp.generated_image.data[i] = (1.0 - s) * req.rendered_image.data[i] + s * target.data[i];
  return resp;
}

class MockGuidance final : public GuidanceProvider {
 public:
  explicit MockGuidance(OracleScene oracle, NoiseSchedule schedule = make_noise_schedule(),
                        const SketchDataset* dataset = nullptr)
      : oracle_(std::move(oracle)), schedule_(std::move(schedule)), dataset_(dataset) {}

  GuidanceResponse generate(const GuidanceRequest& request) override {
    return mock_generate(request, oracle_, schedule_, dataset_);
  }

  const OracleScene& oracle() const { return oracle_; }

 private:
  OracleScene oracle_;
  NoiseSchedule schedule_;
  const SketchDataset* dataset_;
};

}  // namespace sketch3d
