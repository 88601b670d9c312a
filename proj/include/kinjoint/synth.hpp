#pragma once

// Synthetic family generator, a data-free stand-in for the kinship corpora.
//
// Each family draws a latent genome vector; the parent renders from it and
// the child from an even blend of the parent genome and fresh noise, so
// child-parent pixel statistics correlate while unrelated pairs do not.
// A gender pattern is mixed in per person: fathers and sons share the male
// pattern, mothers and daughters the female one, which makes same-gender
// kin types (F-S, M-D) the easier manifolds, as observed on the real data.
// Pixels are quantized to 8 bits so in-memory images equal their PPM files.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "kinjoint/data.hpp"
#include "kinjoint/rng.hpp"
#include "kinjoint/tensor.hpp"
#include "kinjoint/types.hpp"

namespace kinjoint {

struct SynthConfig {
  int families_per_type = 100;
  int image_size = 16;  // square images
  int genome_dim = 12;
  std::uint64_t seed = 7;
  std::string dataset_name = "synthetic";
  double genome_strength = 0.35;
  double gender_strength = 0.2;
};

struct SynthFamily {
  KinType kin_type{1};
  int family_index = 0;
  std::vector<double> parent_genome;
  std::vector<double> child_genome;
};

struct SynthResult {
  Manifest manifest;
  std::vector<Tensor> images;  // aligned with manifest.records, HWC [0,1]
  std::vector<SynthFamily> families;
};

namespace detail {

// Smooth random rendering basis: one low-frequency cosine pattern per
// (genome component, channel), fixed by the dataset seed.
struct RenderBasis {
  int size;
  int dim;
  std::vector<double> fx, fy, phase, amp;  // dim*3 each
  std::vector<double> gfx, gfy, gphase;    // 2 genders * 3 channels

  RenderBasis(int image_size, int genome_dim, std::uint64_t seed)
      : size(image_size), dim(genome_dim) {
    Rng rng(mix_seed(seed, 0xBA515));
    const int n = dim * 3;
    fx.resize(n);
    fy.resize(n);
    phase.resize(n);
    amp.resize(n);
    for (int i = 0; i < n; ++i) {
      fx[i] = rng.uniform(0.3, 1.8);
      fy[i] = rng.uniform(0.3, 1.8);
      phase[i] = rng.uniform(0.0, 2.0 * M_PI);
      amp[i] = rng.uniform(0.5, 1.0);
    }
    gfx.resize(6);
    gfy.resize(6);
    gphase.resize(6);
    for (int i = 0; i < 6; ++i) {
      gfx[i] = rng.uniform(0.5, 2.2);
      gfy[i] = rng.uniform(0.5, 2.2);
      gphase[i] = rng.uniform(0.0, 2.0 * M_PI);
    }
  }

  double pattern(int k, int c, int y, int x) const {
    const int i = k * 3 + c;
    return amp[i] * std::cos(2.0 * M_PI *
                                 (fx[i] * x / size + fy[i] * y / size) +
                             phase[i]);
  }

  // gender: 0 male, 1 female
  double gender_pattern(int gender, int c, int y, int x) const {
    const int i = gender * 3 + c;
    return std::cos(2.0 * M_PI * (gfx[i] * x / size + gfy[i] * y / size) +
                    gphase[i]);
  }
};

inline Tensor render_person(const RenderBasis& basis,
                            const std::vector<double>& genome, int gender,
                            double genome_strength, double gender_strength) {
  const int s = basis.size;
  Tensor img({s, s, 3});
  const double norm = 1.0 / std::sqrt(static_cast<double>(basis.dim));
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = 0; k < basis.dim; ++k)
          acc += genome[k] * basis.pattern(k, c, y, x);
        double v = 0.5 + genome_strength * acc * norm +
                   gender_strength * basis.gender_pattern(gender, c, y, x);
        // quantize to 8 bits so disk round trips are exact
        v = std::clamp(v, 0.0, 1.0);
        img[(y * s + x) * 3 + c] =
            std::lround(v * 255.0) / 255.0;
      }
  return img;
}

inline int parent_gender(KinType kin) { return kin.code <= 2 ? 0 : 1; }
inline int child_gender(KinType kin) { return kin.code % 2 == 1 ? 1 : 0; }

}  // namespace detail

inline SynthResult synth_families(const SynthConfig& cfg) {
  if (cfg.families_per_type < 5)
    throw std::runtime_error("synth_families: need at least 5 families per type");
  if (cfg.image_size < 8)
    throw std::runtime_error("synth_families: image size too small to encode "
                             "the genome patterns (need >= 8)");
  if (cfg.genome_dim < 1)
    throw std::runtime_error("synth_families: genome_dim must be positive");

  detail::RenderBasis basis(cfg.image_size, cfg.genome_dim, cfg.seed);
  SynthResult result;
  result.manifest.dataset_name = cfg.dataset_name;

  for (KinType kin : all_kin_types()) {
    Rng rng(mix_seed(cfg.seed, 0xFA417, static_cast<std::uint64_t>(kin.code)));
    for (int f = 0; f < cfg.families_per_type; ++f) {
      SynthFamily fam;
      fam.kin_type = kin;
      fam.family_index = f;
      fam.parent_genome.resize(cfg.genome_dim);
      fam.child_genome.resize(cfg.genome_dim);
      for (int k = 0; k < cfg.genome_dim; ++k) {
        fam.parent_genome[k] = rng.normal();
        fam.child_genome[k] = 0.5 * fam.parent_genome[k] + 0.5 * rng.normal();
      }

      char fam_id[32];
      std::snprintf(fam_id, sizeof(fam_id), "%s_%03d", kin.name(), f);
      for (char role : {'p', 'c'}) {
        ManifestRecord rec;
        rec.image_id = std::string(fam_id) + "_" + role;
        rec.path = "images/" + rec.image_id + ".ppm";
        rec.kin_type = kin;
        rec.family_index = f;
        rec.role = role;
        result.manifest.records.push_back(rec);
        const bool is_parent = role == 'p';
        result.images.push_back(detail::render_person(
            basis, is_parent ? fam.parent_genome : fam.child_genome,
            is_parent ? detail::parent_gender(kin) : detail::child_gender(kin),
            cfg.genome_strength, cfg.gender_strength));
      }
      result.families.push_back(std::move(fam));
    }
  }
  result.manifest.rebuild_index();
  return result;
}

}  // namespace kinjoint
