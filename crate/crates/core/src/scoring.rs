//! Pixel-wise anomaly maps and image-level scores.
//!
//! All arithmetic here is `f64`; network outputs are widened once when
//! collected into [`EnsembleOutputs`].

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ddad_autograd::TensorError;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneKind, Mode};
use crate::data::{write_pgm8, ImagePool};
use crate::error::{DdadError, Result};
use crate::trainer::EnsembleModule;

/// Lower bound applied to σ before dividing by it.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// squared error of a single module-B network
    Rec,
    /// squared error of module B's mean reconstruction
    RecEnsemble,
    Intra,
    Inter,
    IntraRefined,
    InterRefined,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::Rec,
        ScoreKind::RecEnsemble,
        ScoreKind::Intra,
        ScoreKind::Inter,
        ScoreKind::IntraRefined,
        ScoreKind::InterRefined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Rec => "rec",
            ScoreKind::RecEnsemble => "rec_ensemble",
            ScoreKind::Intra => "intra",
            ScoreKind::Inter => "inter",
            ScoreKind::IntraRefined => "intra_refined",
            ScoreKind::InterRefined => "inter_refined",
        }
    }

    pub fn is_refined(self) -> bool {
        matches!(self, ScoreKind::IntraRefined | ScoreKind::InterRefined)
    }

    /// Whether computing this kind needs module A.
    pub fn needs_module_a(self) -> bool {
        matches!(self, ScoreKind::Inter | ScoreKind::InterRefined)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = DdadError;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DdadError::Config(format!("unknown score kind '{s}'")))
    }
}

/// How per-member σ² maps of module B are pooled into one σ map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPooling {
    /// `sqrt(mean_i σ_i²)`
    #[default]
    RootMeanVariance,
    /// `mean_i σ_i`
    MeanSigma,
}

impl FromStr for SigmaPooling {
    type Err = DdadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "root_mean_variance" | "rmv" => Ok(SigmaPooling::RootMeanVariance),
            "mean_sigma" => Ok(SigmaPooling::MeanSigma),
            other => Err(DdadError::Config(format!("unknown sigma pooling '{other}'"))),
        }
    }
}

/// Per-pixel scores of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub side: usize,
    pub scores: Vec<f64>,
    pub kind: ScoreKind,
}

/// Reconstructions of one image by every member of a module.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutputs {
    pub side: usize,
    pub members: Vec<Vec<f64>>,
    /// arithmetic mean of `members`
    pub mean: Vec<f64>,
    /// per-member σ² maps, present for AE-U members
    pub variances: Option<Vec<Vec<f64>>>,
}

fn shape_error(what: &str, a: usize, b: usize) -> DdadError {
    TensorError::Shape(format!("{what}: {a} vs {b} pixels")).into()
}

impl EnsembleOutputs {
    pub fn new(side: usize, members: Vec<Vec<f64>>, variances: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let n = side * side;
        if members.is_empty() {
            return Err(DdadError::Contract("ensemble outputs need at least one member".into()));
        }
        for m in members.iter().chain(variances.iter().flatten()) {
            if m.len() != n {
                return Err(shape_error("ensemble member", m.len(), n));
            }
        }
        if let Some(v) = &variances {
            if v.len() != members.len() {
                return Err(DdadError::Contract(format!("{} variance maps for {} members", v.len(), members.len())));
            }
        }
        let k = members.len() as f64;
        let mean = (0..n).map(|p| members.iter().map(|m| m[p]).sum::<f64>() / k).collect();
        Ok(Self { side, members, mean, variances })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Pooled σ map, or `None` when the members carry no variance.
    pub fn pooled_sigma(&self, pooling: SigmaPooling) -> Option<Vec<f64>> {
        let vars = self.variances.as_ref()?;
        let k = vars.len() as f64;
        let n = self.side * self.side;
        Some(
            (0..n)
                .map(|p| match pooling {
                    SigmaPooling::RootMeanVariance => (vars.iter().map(|v| v[p]).sum::<f64>() / k).sqrt(),
                    SigmaPooling::MeanSigma => vars.iter().map(|v| v[p].sqrt()).sum::<f64>() / k,
                })
                .collect(),
        )
    }
}

/// `(x - x̂)²` per pixel.
pub fn score_rec(x: &[f64], reconstruction: &[f64], side: usize) -> Result<AnomalyMap> {
    if x.len() != side * side || reconstruction.len() != x.len() {
        return Err(shape_error("score_rec", x.len(), reconstruction.len()));
    }
    Ok(AnomalyMap {
        side,
        scores: x.iter().zip(reconstruction).map(|(a, b)| (a - b) * (a - b)).collect(),
        kind: ScoreKind::Rec,
    })
}

/// Population standard deviation across module B's members.
pub fn score_intra(outputs_b: &EnsembleOutputs) -> AnomalyMap {
    let k = outputs_b.k() as f64;
    let scores = outputs_b
        .mean
        .iter()
        .enumerate()
        .map(|(p, mu)| (outputs_b.members.iter().map(|m| (mu - m[p]).powi(2)).sum::<f64>() / k).sqrt())
        .collect();
    AnomalyMap { side: outputs_b.side, scores, kind: ScoreKind::Intra }
}

/// `|μ_A - μ_B|` per pixel.
pub fn score_inter(outputs_a: &EnsembleOutputs, outputs_b: &EnsembleOutputs) -> Result<AnomalyMap> {
    if outputs_a.mean.len() != outputs_b.mean.len() {
        return Err(shape_error("score_inter", outputs_a.mean.len(), outputs_b.mean.len()));
    }
    Ok(AnomalyMap {
        side: outputs_a.side,
        scores: outputs_a.mean.iter().zip(&outputs_b.mean).map(|(a, b)| (a - b).abs()).collect(),
        kind: ScoreKind::Inter,
    })
}

/// Divides an intra or inter map by `max(σ, SIGMA_FLOOR)` pixel-wise.
pub fn refine_with_uncertainty(map: &AnomalyMap, sigma: &[f64]) -> Result<AnomalyMap> {
    let kind = match map.kind {
        ScoreKind::Intra => ScoreKind::IntraRefined,
        ScoreKind::Inter => ScoreKind::InterRefined,
        other => return Err(DdadError::Contract(format!("cannot refine a {other} map"))),
    };
    if sigma.len() != map.scores.len() {
        return Err(shape_error("refine_with_uncertainty", map.scores.len(), sigma.len()));
    }
    if let Some(bad) = sigma.iter().find(|s| !s.is_finite()) {
        return Err(DdadError::Contract(format!("non-finite sigma {bad}")));
    }
    Ok(AnomalyMap {
        side: map.side,
        scores: map.scores.iter().zip(sigma).map(|(a, s)| a / s.max(SIGMA_FLOOR)).collect(),
        kind,
    })
}

/// Mean over all pixels.
pub fn image_score(map: &AnomalyMap) -> f64 {
    map.scores.iter().sum::<f64>() / map.scores.len() as f64
}

/// Runs every member of `module` in eval mode over `pool`, one
/// [`EnsembleOutputs`] per image.
pub fn ensemble_outputs(
    module: &mut EnsembleModule,
    pool: &ImagePool,
    batch_size: usize,
) -> Result<Vec<EnsembleOutputs>> {
    if module.nets.is_empty() {
        return Err(DdadError::Contract(format!("module {} has no members", module.role)));
    }
    let side = pool.side();
    let n = side * side;
    let aeu = module.nets[0].kind() == BackboneKind::Aeu;
    let mut recon = vec![Vec::with_capacity(pool.len()); module.k()];
    let mut vars = vec![Vec::with_capacity(pool.len()); module.k()];
    let indices: Vec<usize> = (0..pool.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = pool.batch(chunk)?;
        for (i, net) in module.nets.iter_mut().enumerate() {
            let out = net.forward(&batch.pixels, Mode::Eval)?;
            recon[i].extend(out.reconstruction.data().iter().map(|&v| v as f64));
            if let Some(lv) = out.log_variance {
                vars[i].extend(lv.data().iter().map(|&s| (s as f64).exp()));
            }
        }
    }
    (0..pool.len())
        .map(|j| {
            let members = recon.iter().map(|r| r[j * n..(j + 1) * n].to_vec()).collect();
            let variances = aeu.then(|| vars.iter().map(|v| v[j * n..(j + 1) * n].to_vec()).collect());
            EnsembleOutputs::new(side, members, variances)
        })
        .collect()
}

/// Maps of the requested kinds for every image of a pool.
#[derive(Debug, Clone)]
pub struct ScoredPool {
    pub ids: Vec<String>,
    pub kinds: Vec<ScoreKind>,
    /// `maps[k][j]`: map of kind `kinds[k]` for image `j`
    pub maps: Vec<Vec<AnomalyMap>>,
}

impl ScoredPool {
    /// Image-level scores of `kind`, in pool order.
    pub fn image_scores(&self, kind: ScoreKind) -> Option<Vec<f64>> {
        let k = self.kinds.iter().position(|&k| k == kind)?;
        Some(self.maps[k].iter().map(image_score).collect())
    }
}

/// Scores `pool` with modules A and B. Module A may be `None` when no
/// requested kind needs it; refined kinds require an AE-U module B.
pub fn score_pool(
    module_a: Option<&mut EnsembleModule>,
    module_b: &mut EnsembleModule,
    pool: &ImagePool,
    kinds: &[ScoreKind],
    pooling: SigmaPooling,
    batch_size: usize,
) -> Result<ScoredPool> {
    if kinds.iter().any(|k| k.is_refined()) && module_b.nets.iter().any(|n| n.kind() != BackboneKind::Aeu) {
        return Err(DdadError::Contract("uncertainty refinement needs an AE-U module B".into()));
    }
    let out_b = ensemble_outputs(module_b, pool, batch_size)?;
    let out_a = match (module_a, kinds.iter().any(|k| k.needs_module_a())) {
        (Some(a), true) => Some(ensemble_outputs(a, pool, batch_size)?),
        (None, true) => return Err(DdadError::Contract("inter-discrepancy needs module A".into())),
        (_, false) => None,
    };
    let side = pool.side();
    let mut maps = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut per_image = Vec::with_capacity(pool.len());
        for (j, b) in out_b.iter().enumerate() {
            let x: Vec<f64> = pool.image(j).iter().map(|&v| v as f64).collect();
            let sigma = || {
                b.pooled_sigma(pooling).ok_or_else(|| DdadError::Contract("module B carries no variance maps".into()))
            };
            let inter = || score_inter(&out_a.as_ref().expect("module A outputs present")[j], b);
            let map = match kind {
                ScoreKind::Rec => score_rec(&x, &b.members[0], side)?,
                ScoreKind::RecEnsemble => AnomalyMap { kind: ScoreKind::RecEnsemble, ..score_rec(&x, &b.mean, side)? },
                ScoreKind::Intra => score_intra(b),
                ScoreKind::Inter => inter()?,
                ScoreKind::IntraRefined => refine_with_uncertainty(&score_intra(b), &sigma()?)?,
                ScoreKind::InterRefined => refine_with_uncertainty(&inter()?, &sigma()?)?,
            };
            per_image.push(map);
        }
        maps.push(per_image);
    }
    Ok(ScoredPool { ids: pool.ids().to_vec(), kinds: kinds.to_vec(), maps })
}

/// 8-bit binary PGM of the map, min-max scaled.
pub fn write_map_pgm(map: &AnomalyMap, path: &Path) -> Result<()> {
    write_pgm8(path, map.side, map.side, &map.scores)
}

/// Raw little-endian `f32` grid, row-major, no header.
pub fn write_map_raw(map: &AnomalyMap, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let bytes: Vec<u8> = map.scores.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outputs(members: &[&[f64]]) -> EnsembleOutputs {
        let side = (members[0].len() as f64).sqrt() as usize;
        EnsembleOutputs::new(side, members.iter().map(|m| m.to_vec()).collect(), None).unwrap()
    }

    #[test]
    fn rec_examples() {
        let m = score_rec(&[1.0, 0.2, 0.0, 0.3], &[0.5, 0.2, 0.5, 0.3], 2).unwrap();
        assert_eq!(m.scores, vec![0.25, 0.0, 0.25, 0.0]);
        assert!(score_rec(&[1.0; 4], &[1.0; 3], 2).is_err());
    }

    #[test]
    fn inter_is_symmetric() {
        let a = outputs(&[&[0.8, 0.1, 0.0, 1.0]]);
        let b = outputs(&[&[0.3, 0.1, 0.5, 0.0]]);
        let ab = score_inter(&a, &b).unwrap();
        assert!((ab.scores[0] - 0.5).abs() < 1e-15);
        assert_eq!(ab.scores, score_inter(&b, &a).unwrap().scores);
    }

    #[test]
    fn refinement_contract() {
        let rec = score_rec(&[1.0], &[0.0], 1).unwrap();
        assert!(matches!(refine_with_uncertainty(&rec, &[1.0]), Err(DdadError::Contract(_))));
        let intra = score_intra(&outputs(&[&[0.0], &[2.0]]));
        assert_eq!(refine_with_uncertainty(&intra, &[0.0]).unwrap().scores, vec![1.0 / SIGMA_FLOOR]);
    }

    #[test]
    fn pooling_variants() {
        let o = EnsembleOutputs::new(1, vec![vec![0.0], vec![0.0]], Some(vec![vec![1.0], vec![9.0]])).unwrap();
        assert_eq!(o.pooled_sigma(SigmaPooling::RootMeanVariance).unwrap(), vec![5f64.sqrt()]);
        assert_eq!(o.pooled_sigma(SigmaPooling::MeanSigma).unwrap(), vec![2.0]);
        assert!(outputs(&[&[0.0]]).pooled_sigma(SigmaPooling::MeanSigma).is_none());
    }

    #[test]
    fn score_kind_names_round_trip() {
        for k in ScoreKind::ALL {
            assert_eq!(k.as_str().parse::<ScoreKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ScoreKind>().is_err());
    }
}
