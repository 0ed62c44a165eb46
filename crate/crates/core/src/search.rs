//! Patch matching between LR and degraded-reference features, and the sparse
//! transfer maps that paste the matched reference patches back together.

use std::rc::Rc;

use ltgsr_autograd::{gemm, Scalar, SpatialPlan, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, Pyramid};
use crate::error::{invalid, Error, Result};

/// Patches with a smaller L2 norm are treated as zero vectors.
pub const NORM_EPS: f64 = 1e-12;
/// Largest grid side the brute-force oracle accepts.
pub const ORACLE_MAX_GRID: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMode {
    /// Search once at the coarsest scale and reuse the indices with scaled patches.
    Shared,
    /// Search every scale on its own features.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub patch: usize,
    /// Cosine matching; `false` uses raw inner products.
    pub normalize: bool,
    pub mode: SearchMode,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            patch: 3,
            normalize: true,
            mode: SearchMode::Shared,
        }
    }
}

/// Row-major `N × dim` patch matrix; each row is ordered channel, then row, then column.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Vec<f64>,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub stride: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.patches[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexMap {
    pub idx: Vec<u32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub source_grid: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub r: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Transferred textures with the relevance gates used to weight them.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureBundle<S> {
    pub t: Pyramid<Tensor<S>>,
    /// `[1, 1, H_i, W_i]` relevance per scale.
    pub r: Pyramid<Tensor<S>>,
    pub idx: IndexMap,
    pub relevance: RelevanceMap,
}

fn single_sample<S: Scalar>(feat: &Tensor<S>) -> Result<[usize; 3]> {
    let [n, c, h, w] = feat.shape();
    if n != 1 {
        return invalid(format!("expected one sample, got shape {:?}", feat.shape()));
    }
    Ok([c, h, w])
}

/// Sliding-window patches with `(patch - 1) / 2` zero padding.
pub fn unfold<S: Scalar>(feat: &Tensor<S>, patch: usize, stride: usize) -> Result<PatchGrid> {
    let [c, h, w] = single_sample(feat)?;
    if patch % 2 == 0 {
        return invalid(format!("patch size must be odd, got {patch}"));
    }
    if patch > h.min(w) {
        return invalid(format!("patch {patch} exceeds map {h}x{w}"));
    }
    if stride == 0 {
        return invalid("stride must be >= 1");
    }
    let pad = (patch - 1) / 2;
    let (gh, gw) = (h.div_ceil(stride), w.div_ceil(stride));
    let dim = c * patch * patch;
    let src = feat.data();
    let mut patches = vec![0.0; gh * gw * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut patches[(gy * gw + gx) * dim..(gy * gw + gx + 1) * dim];
            for ch in 0..c {
                for dy in 0..patch {
                    let y = (gy * stride + dy) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..patch {
                        let x = (gx * stride + dx) as isize - pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        row[(ch * patch + dy) * patch + dx] =
                            src[(ch * h + y as usize) * w + x as usize].as_f64();
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        dim,
        grid_h: gh,
        grid_w: gw,
        patch,
        stride,
    })
}

fn normalized_rows(g: &PatchGrid) -> Vec<f64> {
    let mut out = g.patches.clone();
    for row in out.chunks_mut(g.dim.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= NORM_EPS {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Best key for every query row; ties go to the smallest key index.
pub fn search_patches(q: &PatchGrid, k: &PatchGrid, normalize: bool) -> Result<(Vec<u32>, Vec<f64>)> {
    if q.dim != k.dim {
        return invalid(format!("patch length mismatch: {} vs {}", q.dim, k.dim));
    }
    if k.is_empty() {
        return invalid("empty key grid");
    }
    let (qm, km) = if normalize {
        (normalized_rows(q), normalized_rows(k))
    } else {
        (q.patches.clone(), k.patches.clone())
    };
    let nk = k.len();
    let dim = q.dim;
    const CHUNK: usize = 64;
    let results: Vec<(u32, f64)> = qm
        .par_chunks(CHUNK * dim)
        .flat_map_iter(|rows| {
            let m = rows.len() / dim;
            let mut scores = vec![0.0f64; m * nk];
            gemm(false, true, m, nk, dim, rows, &km, 0.0, &mut scores);
            scores
                .chunks(nk)
                .map(|s| {
                    let mut best = (0u32, s[0]);
                    for (j, &v) in s.iter().enumerate().skip(1) {
                        if v > best.1 {
                            best = (j as u32, v);
                        }
                    }
                    best
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(results.into_iter().unzip())
}

fn search_maps(q: &PatchGrid, k: &PatchGrid, normalize: bool) -> Result<(IndexMap, RelevanceMap)> {
    let (idx, r) = search_patches(q, k, normalize)?;
    Ok((
        IndexMap {
            idx,
            grid_h: q.grid_h,
            grid_w: q.grid_w,
            source_grid: (k.grid_h, k.grid_w),
        },
        RelevanceMap {
            r,
            grid_h: q.grid_h,
            grid_w: q.grid_w,
        },
    ))
}

/// Cosine-normalized patch search at stride 1.
pub fn relevance_search<S: Scalar>(
    f_lr: &Tensor<S>,
    f_refdown: &Tensor<S>,
    patch: usize,
) -> Result<(IndexMap, RelevanceMap)> {
    relevance_search_with(f_lr, f_refdown, patch, true)
}

pub fn relevance_search_with<S: Scalar>(
    f_lr: &Tensor<S>,
    f_refdown: &Tensor<S>,
    patch: usize,
    normalize: bool,
) -> Result<(IndexMap, RelevanceMap)> {
    if f_lr.shape()[1] != f_refdown.shape()[1] {
        return invalid(format!(
            "channel mismatch: {} vs {}",
            f_lr.shape()[1],
            f_refdown.shape()[1]
        ));
    }
    let q = unfold(f_lr, patch, 1)?;
    let k = unfold(f_refdown, patch, 1)?;
    search_maps(&q, &k, normalize)
}

/// Sparse fold map pasting source patches chosen by `idx`, with patch, stride
/// and padding of the search geometry scaled by `factor`. Output pixels average
/// every patch covering them; padded source positions contribute zero.
pub fn transfer_plan<S: Scalar>(
    idx: &IndexMap,
    patch: usize,
    factor: usize,
    src_hw: (usize, usize),
) -> Result<SpatialPlan<S>> {
    let (kh, kw) = idx.source_grid;
    if src_hw != (kh * factor, kw * factor) {
        return invalid(format!(
            "source map {src_hw:?} does not match grid {kh}x{kw} at factor {factor}"
        ));
    }
    if idx.idx.len() != idx.grid_h * idx.grid_w {
        return invalid("index map length does not match its grid");
    }
    let (oh, ow) = (idx.grid_h * factor, idx.grid_w * factor);
    let p = patch * factor;
    let pad = ((patch - 1) / 2 * factor) as isize;
    let mut counts = vec![0u32; oh * ow];
    let mut raw = Vec::new();
    for (q, &key) in idx.idx.iter().enumerate() {
        let (qy, qx) = ((q / idx.grid_w * factor) as isize, (q % idx.grid_w * factor) as isize);
        let key = key as usize;
        if key >= kh * kw {
            return invalid(format!("index {key} outside source grid {kh}x{kw}"));
        }
        let (ky, kx) = ((key / kw * factor) as isize, (key % kw * factor) as isize);
        for dy in 0..p as isize {
            let oy = qy - pad + dy;
            if oy < 0 || oy >= oh as isize {
                continue;
            }
            let sy = ky - pad + dy;
            for dx in 0..p as isize {
                let ox = qx - pad + dx;
                if ox < 0 || ox >= ow as isize {
                    continue;
                }
                let o = oy as usize * ow + ox as usize;
                counts[o] += 1;
                let sx = kx - pad + dx;
                if sy >= 0 && sy < src_hw.0 as isize && sx >= 0 && sx < src_hw.1 as isize {
                    raw.push((o as u32, (sy as usize * src_hw.1 + sx as usize) as u32));
                }
            }
        }
    }
    let entries = raw
        .into_iter()
        .map(|(o, i)| (o, i, S::one() / S::lit(counts[o as usize] as f64)))
        .collect();
    Ok(SpatialPlan {
        in_hw: src_hw,
        out_hw: (oh, ow),
        entries,
    })
}

/// `[1, 1, gh * factor, gw * factor]` nearest-neighbour upsampling of `r`.
pub fn upsample_relevance<S: Scalar>(r: &RelevanceMap, factor: usize) -> Tensor<S> {
    let (h, w) = (r.grid_h * factor, r.grid_w * factor);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(S::lit(r.r[(y / factor) * r.grid_w + x / factor]));
        }
    }
    Tensor::from_vec([1, 1, h, w], data)
}

/// Everything needed to transfer reference features at every scale.
#[derive(Clone, Debug)]
pub struct TransferPlan<S> {
    pub maps: Pyramid<Rc<SpatialPlan<S>>>,
    pub r: Pyramid<Rc<Tensor<S>>>,
    /// Coarsest-scale matches.
    pub idx: IndexMap,
    pub relevance: RelevanceMap,
}

impl<S: Scalar> TransferPlan<S> {
    /// Transfers a reference feature var at `level` (0 = finest).
    pub fn transfer<'t>(&self, level: usize, f_ref: Var<'t, S>) -> Var<'t, S> {
        f_ref.spatial_map(self.maps[level].clone())
    }

    pub fn apply(&self, f_ref: &FeaturePyramid<S>) -> Pyramid<Tensor<S>> {
        Pyramid([0, 1, 2].map(|l| self.maps[l].apply(&f_ref[l], false)))
    }

    pub fn bundle(&self, f_ref: &FeaturePyramid<S>) -> TextureBundle<S> {
        TextureBundle {
            t: self.apply(f_ref),
            r: self.r.map(|r| (**r).clone()),
            idx: self.idx.clone(),
            relevance: self.relevance.clone(),
        }
    }
}

fn dims<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    let s = t.shape();
    (s[2], s[3])
}

fn check_pyramid_dims<S: Scalar>(f_ref: &FeaturePyramid<S>, f_refdown: &FeaturePyramid<S>) -> Result<()> {
    for l in 0..3 {
        if f_ref[l].shape() != f_refdown[l].shape() {
            return invalid(format!(
                "reference and degraded reference features differ at scale {}: {:?} vs {:?}",
                l + 1,
                f_ref[l].shape(),
                f_refdown[l].shape()
            ));
        }
    }
    Ok(())
}

/// Runs the search and builds transfer maps for all scales.
pub fn plan_transfer<S: Scalar>(
    f_lr: &FeaturePyramid<S>,
    f_refdown: &FeaturePyramid<S>,
    f_ref: &FeaturePyramid<S>,
    cfg: &SearchConfig,
) -> Result<TransferPlan<S>> {
    check_pyramid_dims(f_ref, f_refdown)?;
    match cfg.mode {
        SearchMode::Shared => {
            let (idx, relevance) =
                relevance_search_with(&f_lr[2], &f_refdown[2], cfg.patch, cfg.normalize)?;
            let mut maps = Vec::with_capacity(3);
            let mut r = Vec::with_capacity(3);
            for l in 0..3 {
                let factor = 1 << (2 - l);
                maps.push(Rc::new(transfer_plan(&idx, cfg.patch, factor, dims(&f_ref[l]))?));
                r.push(Rc::new(upsample_relevance(&relevance, factor)));
            }
            Ok(TransferPlan {
                maps: Pyramid(maps.try_into().expect("three scales")),
                r: Pyramid(r.try_into().expect("three scales")),
                idx,
                relevance,
            })
        }
        SearchMode::Independent => {
            let mut maps = Vec::with_capacity(3);
            let mut r = Vec::with_capacity(3);
            let mut last = None;
            for l in 0..3 {
                let (idx, rel) =
                    relevance_search_with(&f_lr[l], &f_refdown[l], cfg.patch, cfg.normalize)?;
                maps.push(Rc::new(transfer_plan(&idx, cfg.patch, 1, dims(&f_ref[l]))?));
                r.push(Rc::new(upsample_relevance(&rel, 1)));
                last = Some((idx, rel));
            }
            let (idx, relevance) = last.expect("three scales");
            Ok(TransferPlan {
                maps: Pyramid(maps.try_into().expect("three scales")),
                r: Pyramid(r.try_into().expect("three scales")),
                idx,
                relevance,
            })
        }
    }
}

/// Shared-index texture transfer for a precomputed coarsest-scale match.
pub fn gather_textures<S: Scalar>(
    f_ref: &FeaturePyramid<S>,
    idx: &IndexMap,
    r: &RelevanceMap,
    cfg: &SearchConfig,
) -> Result<TextureBundle<S>> {
    if (r.grid_h, r.grid_w) != (idx.grid_h, idx.grid_w) {
        return invalid("relevance and index grids differ");
    }
    let mut t = Vec::with_capacity(3);
    let mut rs = Vec::with_capacity(3);
    for l in 0..3 {
        let factor = 1 << (2 - l);
        let plan = transfer_plan::<S>(idx, cfg.patch, factor, dims(&f_ref[l]))?;
        t.push(plan.apply(&f_ref[l], false));
        rs.push(upsample_relevance(r, factor));
    }
    Ok(TextureBundle {
        t: Pyramid(t.try_into().expect("three scales")),
        r: Pyramid(rs.try_into().expect("three scales")),
        idx: idx.clone(),
        relevance: r.clone(),
    })
}

/// Folds arbitrary patch rows back onto a map with overlap averaging.
pub fn fold_patches(
    rows: &[f64],
    grid: (usize, usize),
    channels: usize,
    patch: usize,
    stride: usize,
    out_hw: (usize, usize),
) -> Result<Tensor<f64>> {
    let dim = channels * patch * patch;
    if rows.len() != grid.0 * grid.1 * dim {
        return invalid("patch rows do not match grid and patch size");
    }
    let (h, w) = out_hw;
    let pad = ((patch - 1) / 2) as isize;
    let mut acc = vec![0.0; channels * h * w];
    let mut cnt = vec![0.0; h * w];
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let row = &rows[(gy * grid.1 + gx) * dim..(gy * grid.1 + gx + 1) * dim];
            for dy in 0..patch {
                let y = (gy * stride + dy) as isize - pad;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..patch {
                    let x = (gx * stride + dx) as isize - pad;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let o = y as usize * w + x as usize;
                    cnt[o] += 1.0;
                    for c in 0..channels {
                        acc[c * h * w + o] += row[(c * patch + dy) * patch + dx];
                    }
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        let n = cnt[i % (h * w)];
        if n > 0.0 {
            *v /= n;
        }
    }
    Ok(Tensor::from_vec([1, channels, h, w], acc))
}

/// Rows of `k` selected by `idx`, concatenated.
pub fn select_rows(k: &PatchGrid, idx: &[u32]) -> Vec<f64> {
    idx.iter().flat_map(|&i| k.row(i as usize).iter().copied()).collect()
}

fn guard(h: usize, w: usize, what: &str) -> Result<()> {
    if h > ORACLE_MAX_GRID || w > ORACLE_MAX_GRID {
        return Err(Error::CostGuard(format!(
            "{what} grid {h}x{w} exceeds {ORACLE_MAX_GRID}x{ORACLE_MAX_GRID}"
        )));
    }
    Ok(())
}

fn padded_get(t: &Tensor<f64>, c: usize, y: isize, x: isize) -> f64 {
    let [_, _, h, w] = t.shape();
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        t.at(0, c, y as usize, x as usize)
    }
}

/// Exhaustive reference implementation of search plus shared-index transfer.
pub fn brute_force_oracle<S: Scalar>(
    f_lr: &Tensor<S>,
    f_refdown: &Tensor<S>,
    f_ref: &FeaturePyramid<S>,
    patch: usize,
) -> Result<(IndexMap, RelevanceMap, TextureBundle<S>)> {
    let [c, qh, qw] = single_sample(f_lr)?;
    let [ck, kh, kw] = single_sample(f_refdown)?;
    guard(qh, qw, "query")?;
    guard(kh, kw, "key")?;
    if c != ck {
        return invalid(format!("channel mismatch: {c} vs {ck}"));
    }
    if patch % 2 == 0 || patch > qh.min(qw).min(kh).min(kw) {
        return invalid(format!("invalid patch size {patch}"));
    }
    let q = f_lr.cast::<f64>();
    let k = f_refdown.cast::<f64>();
    let pad = ((patch - 1) / 2) as isize;
    let norm_at = |t: &Tensor<f64>, y: usize, x: usize| {
        let mut s = 0.0;
        for ch in 0..c {
            for dy in 0..patch as isize {
                for dx in 0..patch as isize {
                    let v = padded_get(t, ch, y as isize - pad + dy, x as isize - pad + dx);
                    s += v * v;
                }
            }
        }
        let n = s.sqrt();
        if n <= NORM_EPS {
            0.0
        } else {
            1.0 / n
        }
    };
    let mut idx = vec![0u32; qh * qw];
    let mut rel = vec![0.0; qh * qw];
    for qy in 0..qh {
        for qx in 0..qw {
            let qs = norm_at(&q, qy, qx);
            let mut best = (0u32, f64::NEG_INFINITY);
            for ky in 0..kh {
                for kx in 0..kw {
                    let ks = norm_at(&k, ky, kx);
                    let mut dot = 0.0;
                    for ch in 0..c {
                        for dy in 0..patch as isize {
                            for dx in 0..patch as isize {
                                dot += padded_get(&q, ch, qy as isize - pad + dy, qx as isize - pad + dx)
                                    * qs
                                    * (padded_get(&k, ch, ky as isize - pad + dy, kx as isize - pad + dx) * ks);
                            }
                        }
                    }
                    if dot > best.1 {
                        best = ((ky * kw + kx) as u32, dot);
                    }
                }
            }
            idx[qy * qw + qx] = best.0;
            rel[qy * qw + qx] = best.1;
        }
    }
    let idx = IndexMap {
        idx,
        grid_h: qh,
        grid_w: qw,
        source_grid: (kh, kw),
    };
    let relevance = RelevanceMap {
        r: rel,
        grid_h: qh,
        grid_w: qw,
    };

    let mut t = Vec::with_capacity(3);
    let mut rs = Vec::with_capacity(3);
    for l in 0..3 {
        let s = 1usize << (2 - l);
        let src = f_ref[l].cast::<f64>();
        let [_, cl, sh, sw] = src.shape();
        if (sh, sw) != (kh * s, kw * s) {
            return invalid(format!("reference map at scale {} has wrong dims", l + 1));
        }
        let (oh, ow) = (qh * s, qw * s);
        let p = (patch * s) as isize;
        let pad_s = pad * s as isize;
        let mut acc = vec![0.0; cl * oh * ow];
        let mut cnt = vec![0.0; oh * ow];
        for qy in 0..qh {
            for qx in 0..qw {
                let key = idx.idx[qy * qw + qx] as usize;
                let (ky, kx) = ((key / kw * s) as isize, (key % kw * s) as isize);
                for dy in 0..p {
                    for dx in 0..p {
                        let oy = (qy * s) as isize - pad_s + dy;
                        let ox = (qx * s) as isize - pad_s + dx;
                        if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                            continue;
                        }
                        let o = oy as usize * ow + ox as usize;
                        cnt[o] += 1.0;
                        for ch in 0..cl {
                            acc[ch * oh * ow + o] += padded_get(&src, ch, ky - pad_s + dy, kx - pad_s + dx);
                        }
                    }
                }
            }
        }
        for ch in 0..cl {
            for o in 0..oh * ow {
                acc[ch * oh * ow + o] /= cnt[o];
            }
        }
        t.push(Tensor::from_vec([1, cl, oh, ow], acc.into_iter().map(S::lit).collect()));
        rs.push(upsample_relevance(&relevance, s));
    }
    let bundle = TextureBundle {
        t: Pyramid(t.try_into().expect("three scales")),
        r: Pyramid(rs.try_into().expect("three scales")),
        idx: idx.clone(),
        relevance: relevance.clone(),
    };
    Ok((idx, relevance, bundle))
}

/// Worst disagreement between the fast path and the oracle over a suite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub trials: usize,
    /// Query positions whose matched index differs, summed over trials.
    pub index_mismatches: usize,
    pub max_relevance_dev: f64,
    pub max_texture_dev: f64,
}

fn random_feature(rng: &mut impl rand::Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([1, c, h, w], |_| rng.gen_range(-1.0..1.0))
}

/// Runs `trials` random instances (grids up to 16×16, up to 8 channels per
/// scale, patch 3) through both the fast search/transfer and the oracle.
pub fn oracle_check(trials: usize, seed: u64) -> Result<OracleReport> {
    use rand::Rng;
    let mut report = OracleReport {
        trials,
        ..OracleReport::default()
    };
    let cfg = SearchConfig::default();
    for trial in 0..trials {
        let mut rng = crate::seeds::rng(seed, &[trial as u64]);
        let (qh, qw) = (rng.gen_range(3..=16), rng.gen_range(3..=16));
        let (kh, kw) = (rng.gen_range(3..=16), rng.gen_range(3..=16));
        let c: [usize; 3] = [rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8)];
        let q = random_feature(&mut rng, c[2], qh, qw);
        let k = random_feature(&mut rng, c[2], kh, kw);
        let f_ref = Pyramid([
            random_feature(&mut rng, c[0], 4 * kh, 4 * kw),
            random_feature(&mut rng, c[1], 2 * kh, 2 * kw),
            random_feature(&mut rng, c[2], kh, kw),
        ]);
        let (idx, rel) = relevance_search(&q, &k, cfg.patch)?;
        let fast = gather_textures(&f_ref, &idx, &rel, &cfg)?;
        let (oi, orl, ob) = brute_force_oracle(&q, &k, &f_ref, cfg.patch)?;
        report.index_mismatches += idx.idx.iter().zip(&oi.idx).filter(|(a, b)| a != b).count();
        let dev = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        report.max_relevance_dev = report.max_relevance_dev.max(dev(&rel.r, &orl.r));
        for l in 0..3 {
            if fast.t[l].shape() != ob.t[l].shape() || fast.r[l].shape() != ob.r[l].shape() {
                return Err(Error::InvalidState("fast and oracle texture shapes differ".into()));
            }
            report.max_texture_dev = report.max_texture_dev.max(dev(fast.t[l].data(), ob.t[l].data()));
            report.max_relevance_dev = report.max_relevance_dev.max(dev(fast.r[l].data(), ob.r[l].data()));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([1, c, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    fn random_pyramid(rng: &mut ChaCha8Rng, c: [usize; 3], h: usize, w: usize) -> FeaturePyramid<f64> {
        Pyramid([
            random_map(rng, c[0], 4 * h, 4 * w),
            random_map(rng, c[1], 2 * h, 2 * w),
            random_map(rng, c[2], h, w),
        ])
    }

    #[test]
    fn unfold_patch_one_is_identity() {
        let t = Tensor::from_fn([1, 1, 4, 4], |i| i as f64);
        let g = unfold(&t, 1, 1).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g.patches, (0..16).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn unfold_pads_corners_with_zero() {
        let t = Tensor::full([1, 1, 4, 4], 2.0);
        let g = unfold(&t, 3, 1).unwrap();
        assert_eq!((g.len(), g.dim), (16, 9));
        assert_eq!(g.row(0), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 2.0, 2.0]);
        assert_eq!(g.row(5), &[2.0; 9]);
    }

    #[test]
    fn unfold_rejects_even_patch() {
        let t = Tensor::<f64>::zeros([1, 1, 4, 4]);
        assert!(unfold(&t, 2, 1).is_err());
        assert!(unfold(&t, 5, 1).is_err());
    }

    #[test]
    fn unfold_stride_grid_is_ceiling() {
        let t = Tensor::<f64>::zeros([1, 2, 7, 5]);
        let g = unfold(&t, 3, 2).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (4, 3));
    }

    #[test]
    fn self_search_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_map(&mut rng, 4, 8, 8);
        let (idx, r) = relevance_search(&f, &f, 3).unwrap();
        assert_eq!(idx.idx, (0..64).collect::<Vec<u32>>());
        assert!(r.r.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_query_gives_zero_relevance_and_first_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::<f64>::zeros([1, 4, 8, 8]);
        let k = random_map(&mut rng, 4, 8, 8);
        let (idx, r) = relevance_search(&z, &k, 3).unwrap();
        assert!(idx.idx.iter().all(|&i| i == 0));
        assert!(r.r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros([1, 4, 8, 8]);
        let b = Tensor::<f64>::zeros([1, 3, 8, 8]);
        assert!(relevance_search(&a, &b, 3).is_err());
    }

    #[test]
    fn fast_path_matches_oracle_seed_11() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_map(&mut rng, 4, 8, 8);
        let k = random_map(&mut rng, 4, 8, 8);
        let f_ref = Pyramid([
            random_map(&mut rng, 2, 32, 32),
            random_map(&mut rng, 3, 16, 16),
            random_map(&mut rng, 4, 8, 8),
        ]);
        let (idx, r) = relevance_search(&q, &k, 3).unwrap();
        let (oi, or, ob) = brute_force_oracle(&q, &k, &f_ref, 3).unwrap();
        assert_eq!(idx, oi);
        for (a, b) in r.r.iter().zip(&or.r) {
            assert!((a - b).abs() < 1e-12);
        }
        let fast = gather_textures(&f_ref, &idx, &r, &SearchConfig::default()).unwrap();
        for l in 0..3 {
            assert_eq!(fast.t[l].shape(), ob.t[l].shape());
            for (a, b) in fast.t[l].data().iter().zip(ob.t[l].data()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(fast.r[l].shape(), ob.r[l].shape());
            for (a, b) in fast.r[l].data().iter().zip(ob.r[l].data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_transfer_reproduces_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f_ref = random_pyramid(&mut rng, [2, 3, 4], 6, 5);
        let idx = IndexMap {
            idx: (0..30).collect(),
            grid_h: 6,
            grid_w: 5,
            source_grid: (6, 5),
        };
        let r = RelevanceMap {
            r: vec![1.0; 30],
            grid_h: 6,
            grid_w: 5,
        };
        let b = gather_textures(&f_ref, &idx, &r, &SearchConfig::default()).unwrap();
        for l in 0..3 {
            let err = b.t[l].zip_map(&f_ref[l], |a, b| a - b).max_abs();
            assert!(err < 1e-12, "scale {l} err {err}");
            assert!(b.r[l].data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn constant_reference_gives_constant_texture() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f_ref = Pyramid([
            Tensor::<f64>::full([1, 2, 32, 32], 0.7),
            Tensor::full([1, 2, 16, 16], 0.7),
            Tensor::full([1, 2, 8, 8], 0.7),
        ]);
        // Keep matches away from the border so no padded source is pasted.
        let idx = IndexMap {
            idx: (0..64)
                .map(|_| {
                    let (y, x) = (rng.gen_range(1..7), rng.gen_range(1..7));
                    y * 8 + x
                })
                .collect(),
            grid_h: 8,
            grid_w: 8,
            source_grid: (8, 8),
        };
        let r = RelevanceMap {
            r: vec![0.5; 64],
            grid_h: 8,
            grid_w: 8,
        };
        let b = gather_textures(&f_ref, &idx, &r, &SearchConfig::default()).unwrap();
        for l in 0..3 {
            assert!(b.t[l].data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn coarse_transfer_equals_direct_paste_seed_5() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_map(&mut rng, 3, 8, 8);
        let k = random_map(&mut rng, 3, 8, 8);
        let (idx, r) = relevance_search(&q, &k, 3).unwrap();
        let kg = unfold(&k, 3, 1).unwrap();
        let pasted = fold_patches(&select_rows(&kg, &idx.idx), (8, 8), 3, 3, 1, (8, 8)).unwrap();
        let f_ref = Pyramid([
            random_map(&mut rng, 1, 32, 32),
            random_map(&mut rng, 1, 16, 16),
            k.clone(),
        ]);
        let b = gather_textures(&f_ref, &idx, &r, &SearchConfig::default()).unwrap();
        assert!(b.t[2].zip_map(&pasted, |a, b| a - b).max_abs() < 1e-12);
    }

    #[test]
    fn permuting_keys_leaves_transfer_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = unfold(&random_map(&mut rng, 3, 6, 6), 3, 1).unwrap();
        let k = unfold(&random_map(&mut rng, 3, 6, 6), 3, 1).unwrap();
        let (idx, _) = search_patches(&q, &k, true).unwrap();

        let mut perm: Vec<usize> = (0..k.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut kp = k.clone();
        for (j, &src) in perm.iter().enumerate() {
            kp.patches[j * k.dim..(j + 1) * k.dim].copy_from_slice(k.row(src));
        }
        let (idx_p, _) = search_patches(&q, &kp, true).unwrap();
        let mapped: Vec<u32> = idx_p.iter().map(|&j| perm[j as usize] as u32).collect();
        assert_eq!(mapped, idx);
        let a = fold_patches(&select_rows(&k, &idx), (6, 6), 3, 3, 1, (6, 6)).unwrap();
        let b = fold_patches(&select_rows(&kp, &idx_p), (6, 6), 3, 3, 1, (6, 6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_cost_guard() {
        let q = Tensor::<f64>::zeros([1, 2, 64, 64]);
        let f_ref = Pyramid([
            Tensor::zeros([1, 1, 256, 256]),
            Tensor::zeros([1, 1, 128, 128]),
            Tensor::zeros([1, 1, 64, 64]),
        ]);
        assert!(matches!(
            brute_force_oracle(&q, &q, &f_ref, 3),
            Err(Error::CostGuard(_))
        ));
    }

    #[test]
    fn relevance_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random_map(&mut rng, 5, 10, 7);
        let k = random_map(&mut rng, 5, 9, 12);
        let (_, r) = relevance_search(&q, &k, 3).unwrap();
        assert!(r.r.iter().all(|&v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn independent_mode_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let lr = random_pyramid(&mut rng, [2, 3, 4], 4, 4);
        let rd = random_pyramid(&mut rng, [2, 3, 4], 5, 4);
        let rf = random_pyramid(&mut rng, [2, 3, 4], 5, 4);
        let cfg = SearchConfig {
            mode: SearchMode::Independent,
            ..SearchConfig::default()
        };
        let plan = plan_transfer(&lr, &rd, &rf, &cfg).unwrap();
        let t = plan.apply(&rf);
        for l in 0..3 {
            assert_eq!(t[l].shape(), lr[l].shape());
            assert_eq!(plan.r[l].shape()[2..], lr[l].shape()[2..]);
        }
    }
}
