//! Voxel pooling into a bird's-eye-view grid and the patch self-attention
//! block that refines the pooled map.

use serde::{Deserialize, Serialize};

use crate::frustum::FeaturePointCloud;
use crate::layers::{lecun_bound, linear};
use crate::tensor::{BoundParams, ParamStore, Result, Tape, TensorError, Var};

/// Metric extent of the BEV grid in the ego frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
    pub channels: usize,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self { x_min: 0.0, x_max: 51.2, y_min: -25.6, y_max: 25.6, resolution: 0.8, channels: 32 }
    }
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| {
            let n = (hi - lo) / self.resolution;
            hi > lo && (n - n.round()).abs() < 1e-9 && n.round() >= 1.0
        };
        if !(self.resolution > 0.0) || !ok(self.x_min, self.x_max) || !ok(self.y_min, self.y_max) || self.channels == 0
        {
            return Err(TensorError::Contract(format!("BEV extents must be positive multiples of the resolution: {self:?}")));
        }
        Ok(())
    }

    pub fn cells_x(&self) -> usize {
        ((self.x_max - self.x_min) / self.resolution).round() as usize
    }

    pub fn cells_y(&self) -> usize {
        ((self.y_max - self.y_min) / self.resolution).round() as usize
    }

    pub fn n_cells(&self) -> usize {
        self.cells_x() * self.cells_y()
    }

    /// `(ix, iy)` of the cell containing `(x, y)`, if inside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.x_min) / self.resolution).floor();
        let fy = ((y - self.y_min) / self.resolution).floor();
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        (ix < self.cells_x() && iy < self.cells_y()).then_some((ix, iy))
    }

    /// Row-major flat index (`iy·cells_x + ix`).
    pub fn flat(&self, ix: usize, iy: usize) -> usize {
        iy * self.cells_x() + ix
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }
}

/// `C×cells_y×cells_x` map on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevFeatureMap {
    pub spec: BevGridSpec,
    pub var: Var,
}

/// Sum-pools point features into their BEV cells; height is ignored and
/// points outside the extent are dropped.
pub fn voxel_pool(tape: &mut Tape, cloud: &FeaturePointCloud, spec: &BevGridSpec) -> Result<BevFeatureMap> {
    spec.validate()?;
    let c = cloud.channels;
    if c != spec.channels {
        return Err(TensorError::Dimension(format!("{c}-channel points for a {}-channel grid", spec.channels)));
    }
    let plane = spec.n_cells();
    let mut idx = Vec::with_capacity(cloud.len() * c);
    for p in &cloud.xyz {
        match spec.cell_of(p.x, p.y) {
            Some((ix, iy)) => {
                let cell = spec.flat(ix, iy);
                idx.extend((0..c).map(|ch| ch * plane + cell));
            }
            None => idx.extend(std::iter::repeat(usize::MAX).take(c)),
        }
    }
    let var = tape.scatter_add(cloud.features, idx, &[c, spec.cells_y(), spec.cells_x()])?;
    Ok(BevFeatureMap { spec: *spec, var })
}

/// Non-overlapping square patches of a BEV map, one token per patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSequence {
    /// `n_patches×patch_dim`.
    pub tokens: Var,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub cells_y: usize,
    pub cells_x: usize,
}

/// Flat source index in the `C×Y×X` map of element `e` of token `t`.
fn patch_source(t: usize, e: usize, ps: usize, c: usize, cy: usize, cx: usize) -> usize {
    let (py, px) = (t / (cx / ps), t % (cx / ps));
    let ch = e / (ps * ps);
    let (dy, dx) = ((e / ps) % ps, e % ps);
    debug_assert!(ch < c);
    (ch * cy + py * ps + dy) * cx + px * ps + dx
}

/// Row-major patch order; each token is the flattened `C×ps×ps` block.
pub fn patchify(tape: &mut Tape, bev: &BevFeatureMap, patch_size: usize) -> Result<PatchSequence> {
    let [c, cy, cx] = match *tape.shape(bev.var) {
        [c, y, x] => [c, y, x],
        ref s => return Err(TensorError::Dimension(format!("BEV map must be C×Y×X, got {s:?}"))),
    };
    if patch_size == 0 || cy % patch_size != 0 || cx % patch_size != 0 {
        return Err(TensorError::Dimension(format!("{cy}×{cx} grid is not divisible into {patch_size}-cell patches")));
    }
    let n = (cy / patch_size) * (cx / patch_size);
    let dim = c * patch_size * patch_size;
    let idx = (0..n * dim).map(|i| patch_source(i / dim, i % dim, patch_size, c, cy, cx)).collect();
    let tokens = tape.gather(bev.var, idx, &[n, dim])?;
    Ok(PatchSequence { tokens, n_patches: n, patch_dim: dim, patch_size, channels: c, cells_y: cy, cells_x: cx })
}

/// Exact inverse of [`patchify`].
pub fn depatchify(tape: &mut Tape, seq: &PatchSequence, spec: &BevGridSpec) -> Result<BevFeatureMap> {
    let (ps, c, cy, cx, dim) = (seq.patch_size, seq.channels, seq.cells_y, seq.cells_x, seq.patch_dim);
    let mut idx = vec![0; c * cy * cx];
    for i in 0..seq.n_patches * dim {
        idx[patch_source(i / dim, i % dim, ps, c, cy, cx)] = i;
    }
    let var = tape.gather(seq.tokens, idx, &[c, cy, cx])?;
    Ok(BevFeatureMap { spec: *spec, var })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VpfConfig {
    pub patch_size: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for VpfConfig {
    fn default() -> Self {
        Self { patch_size: 4, n_heads: 4, depth: 1, mlp_ratio: 4 }
    }
}

impl VpfConfig {
    pub fn patch_dim(&self, channels: usize) -> usize {
        channels * self.patch_size * self.patch_size
    }
}

/// Residual output layers (`attn.o`, `mlp.fc2`) and the positional
/// embedding start at zero, so the whole former starts as the identity.
pub fn init_vpf(store: &mut ParamStore, cfg: &VpfConfig, bev: &BevGridSpec, seed: u64) {
    let p = cfg.patch_dim(bev.channels);
    let n = (bev.cells_y() / cfg.patch_size.max(1)) * (bev.cells_x() / cfg.patch_size.max(1));
    let hidden = cfg.mlp_ratio * p;
    store.init_const("vpf.pos_embed", &[n, p], 0.0);
    for b in 0..cfg.depth {
        let pre = format!("vpf.blocks.{b}");
        for ln in ["ln1", "ln2"] {
            store.init_const(&format!("{pre}.{ln}.gamma"), &[p], 1.0);
            store.init_const(&format!("{pre}.{ln}.beta"), &[p], 0.0);
        }
        for proj in ["q", "k", "v"] {
            store.init_uniform(&format!("{pre}.attn.{proj}.weight"), &[p, p], lecun_bound(p), seed);
            store.init_const(&format!("{pre}.attn.{proj}.bias"), &[p], 0.0);
        }
        store.init_const(&format!("{pre}.attn.o.weight"), &[p, p], 0.0);
        store.init_const(&format!("{pre}.attn.o.bias"), &[p], 0.0);
        store.init_uniform(&format!("{pre}.mlp.fc1.weight"), &[p, hidden], lecun_bound(p), seed);
        store.init_const(&format!("{pre}.mlp.fc1.bias"), &[hidden], 0.0);
        store.init_const(&format!("{pre}.mlp.fc2.weight"), &[hidden, p], 0.0);
        store.init_const(&format!("{pre}.mlp.fc2.bias"), &[p], 0.0);
    }
}

fn layer_norm(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{name}.gamma"))?;
    let b = p.get(&format!("{name}.beta"))?;
    tape.layer_norm(x, g, b)
}

/// Columns `h·dh..(h+1)·dh` of an `n×d` matrix.
fn head_slice(tape: &mut Tape, x: Var, n: usize, d: usize, h: usize, dh: usize) -> Result<Var> {
    let idx = (0..n).flat_map(|r| r * d + h * dh..r * d + (h + 1) * dh).collect();
    tape.gather(x, idx, &[n, dh])
}

/// Scaled dot-product attention probabilities of every head, each `n×n`.
pub fn attention_maps(tape: &mut Tape, x: Var, n_heads: usize, prefix: &str, p: &BoundParams) -> Result<Vec<Var>> {
    Ok(attention(tape, x, n_heads, prefix, p)?.1)
}

fn attention(tape: &mut Tape, x: Var, n_heads: usize, prefix: &str, p: &BoundParams) -> Result<(Var, Vec<Var>)> {
    let [n, d] = match *tape.shape(x) {
        [n, d] => [n, d],
        ref s => return Err(TensorError::Dimension(format!("tokens must be N×D, got {s:?}"))),
    };
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::Contract(format!("patch dim {d} is not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let q = linear(tape, p, &format!("{prefix}.q"), x)?;
    let k = linear(tape, p, &format!("{prefix}.k"), x)?;
    let v = linear(tape, p, &format!("{prefix}.v"), x)?;
    let mut outs = Vec::with_capacity(n_heads);
    let mut maps = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = head_slice(tape, q, n, d, h, dh)?;
        let kh = head_slice(tape, k, n, d, h, dh)?;
        let vh = head_slice(tape, v, n, d, h, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
        let a = tape.softmax(s, 1)?;
        outs.push(tape.matmul(a, vh)?);
        maps.push(a);
    }
    let cat = tape.concat_cols(&outs)?;
    Ok((linear(tape, p, &format!("{prefix}.o"), cat)?, maps))
}

/// Pre-norm transformer block over patch tokens:
/// `u = t + pos`, `y = u + MHSA(LN(u))`, `z = y + MLP(LN(y))`.
pub fn mhsa_block(
    tape: &mut Tape,
    seq: &PatchSequence,
    pos_embed: Option<Var>,
    n_heads: usize,
    prefix: &str,
    p: &BoundParams,
) -> Result<PatchSequence> {
    let u = match pos_embed {
        Some(pe) => tape.add(seq.tokens, pe)?,
        None => seq.tokens,
    };
    let a = layer_norm(tape, p, &format!("{prefix}.ln1"), u)?;
    let (att, _) = attention(tape, a, n_heads, &format!("{prefix}.attn"), p)?;
    let y = tape.add(u, att)?;
    let m = layer_norm(tape, p, &format!("{prefix}.ln2"), y)?;
    let m = linear(tape, p, &format!("{prefix}.mlp.fc1"), m)?;
    let m = tape.relu(m)?;
    let m = linear(tape, p, &format!("{prefix}.mlp.fc2"), m)?;
    let z = tape.add(y, m)?;
    Ok(PatchSequence { tokens: z, ..*seq })
}

/// `F_BEV = depatchify(blocks(patchify(F_pool)))`.
pub fn vpf_forward(tape: &mut Tape, f_pool: &BevFeatureMap, cfg: &VpfConfig, p: &BoundParams) -> Result<BevFeatureMap> {
    let mut seq = patchify(tape, f_pool, cfg.patch_size)?;
    let pos = p.get("vpf.pos_embed")?;
    for b in 0..cfg.depth {
        let pe = (b == 0).then_some(pos);
        seq = mhsa_block(tape, &seq, pe, cfg.n_heads, &format!("vpf.blocks.{b}"), p)?;
    }
    depatchify(tape, &seq, &f_pool.spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::tensor::{grad_check, Tensor};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(c: usize) -> BevGridSpec {
        BevGridSpec { x_min: 0.0, x_max: 4.0, y_min: -2.0, y_max: 2.0, resolution: 1.0, channels: c }
    }

    fn cloud(tape: &mut Tape, pts: &[(f64, f64)], feats: &[f64], c: usize) -> FeaturePointCloud {
        let f = tape.constant(Tensor::new(vec![pts.len(), c], feats.to_vec()).unwrap());
        FeaturePointCloud { xyz: pts.iter().map(|&(x, y)| Point3::new(x, y, 0.7)).collect(), features: f, channels: c }
    }

    #[test]
    fn spec_geometry() {
        let s = BevGridSpec::default();
        assert_eq!((s.cells_x(), s.cells_y()), (64, 64));
        assert_eq!(s.cell_of(0.0, -25.6), Some((0, 0)));
        assert_eq!(s.cell_of(51.2, 0.0), None);
        assert_eq!(s.cell_of(-0.01, 0.0), None);
        assert_eq!(s.cell_of(0.85, 0.0), Some((1, 32)));
        let bad = BevGridSpec { resolution: 0.7, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pooling_examples() {
        let spec = tiny_spec(2);
        let mut tape = Tape::new();
        let pc = cloud(&mut tape, &[(1.5, 0.5)], &[1.0, 2.0], 2);
        let g = voxel_pool(&mut tape, &pc, &spec).unwrap();
        let v = tape.value(g.var);
        assert_eq!(v.shape(), &[2, 4, 4]);
        assert_eq!((v.at3(0, 2, 1), v.at3(1, 2, 1)), (1.0, 2.0));
        assert_eq!(v.data().iter().filter(|&&x| x != 0.0).count(), 2);

        let pc = cloud(&mut tape, &[(0.1, -1.9), (0.9, -1.1), (9.0, 0.0)], &[1.0, 0.0, 0.0, 3.0, 5.0, 5.0], 2);
        let g = voxel_pool(&mut tape, &pc, &spec).unwrap();
        let v = tape.value(g.var);
        assert_eq!((v.at3(0, 0, 0), v.at3(1, 0, 0)), (1.0, 3.0));
        assert_eq!(v.data().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn pooling_matches_scatter_oracle() {
        let spec = BevGridSpec { channels: 3, ..BevGridSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(f64, f64)> = (0..500).map(|_| (rng.gen_range(-5.0..56.0), rng.gen_range(-30.0..30.0))).collect();
        let feats: Vec<f64> = (0..1500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let pc = cloud(&mut tape, &pts, &feats, 3);
        let g = voxel_pool(&mut tape, &pc, &spec).unwrap();
        let mut oracle = vec![0.0; 3 * 64 * 64];
        for (n, &(x, y)) in pts.iter().enumerate() {
            let ix = ((x - spec.x_min) / spec.resolution).floor();
            let iy = ((y - spec.y_min) / spec.resolution).floor();
            if ix < 0.0 || iy < 0.0 || ix >= 64.0 || iy >= 64.0 {
                continue;
            }
            for c in 0..3 {
                oracle[(c * 64 + iy as usize) * 64 + ix as usize] += feats[n * 3 + c];
            }
        }
        assert_eq!(tape.value(g.var).data(), &oracle[..]);
    }

    #[test]
    fn patchify_round_trip_and_counts() {
        let spec = tiny_spec(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 4, 4], |i| i as f64 * 0.5));
        let bev = BevFeatureMap { spec, var: x };
        let seq = patchify(&mut tape, &bev, 2).unwrap();
        assert_eq!((seq.n_patches, seq.patch_dim), (4, 12));
        // token 1 = top-right block; first element channel 0 at (row 0, col 2)
        assert_eq!(tape.value(seq.tokens).data()[12], tape.value(x).at3(0, 0, 2));
        let back = depatchify(&mut tape, &seq, &spec).unwrap();
        assert_eq!(tape.value(back.var), tape.value(x));

        let seq1 = patchify(&mut tape, &bev, 1).unwrap();
        assert_eq!((seq1.n_patches, seq1.patch_dim), (16, 3));
        assert!(matches!(patchify(&mut tape, &bev, 3), Err(TensorError::Dimension(_))));
    }

    fn random_store(cfg: &VpfConfig, spec: &BevGridSpec, seed: u64, zero_residual: bool) -> ParamStore {
        let mut store = ParamStore::new();
        init_vpf(&mut store, cfg, spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for (name, t) in store.iter_mut() {
            let keep_zero = zero_residual && (name.contains("attn.o.") || name.contains("fc2") || name.contains("pos"));
            if !keep_zero && !name.contains("pos") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
        }
        store
    }

    fn run_block(store: &ParamStore, tokens: &Tensor, pos: Option<&Tensor>, heads: usize) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let t = tape.constant(tokens.clone());
        let seq = PatchSequence {
            tokens: t,
            n_patches: tokens.shape()[0],
            patch_dim: tokens.shape()[1],
            patch_size: 1,
            channels: tokens.shape()[1],
            cells_y: 1,
            cells_x: tokens.shape()[0],
        };
        let pe = pos.map(|x| tape.constant(x.clone()));
        let y = mhsa_block(&mut tape, &seq, pe, heads, "vpf.blocks.0", &p).unwrap();
        tape.value(y.tokens).clone()
    }

    #[test]
    fn single_token_with_zero_branches_adds_pos() {
        let cfg = VpfConfig { patch_size: 1, n_heads: 2, depth: 1, mlp_ratio: 4 };
        let spec = BevGridSpec { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0, resolution: 1.0, channels: 4 };
        let store = random_store(&cfg, &spec, 3, true);
        let t = Tensor::from_fn(&[1, 4], |i| i as f64 - 1.5);
        let pos = Tensor::from_fn(&[1, 4], |i| 0.1 * i as f64);
        let y = run_block(&store, &t, Some(&pos), 2);
        for i in 0..4 {
            assert_eq!(y.data()[i], t.data()[i] + pos.data()[i]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = VpfConfig { patch_size: 1, n_heads: 2, depth: 1, mlp_ratio: 4 };
        let spec = tiny_spec(4);
        let store = random_store(&cfg, &spec, 5, false);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(&[6, 4], |i| (i as f64 * 0.7).sin()));
        for a in attention_maps(&mut tape, x, 2, "vpf.blocks.0.attn", &p).unwrap() {
            for row in tape.value(a).data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = VpfConfig { patch_size: 1, n_heads: 2, depth: 1, mlp_ratio: 4 };
        let spec = tiny_spec(4);
        let store = random_store(&cfg, &spec, 7, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 7;
        let t = Tensor::from_fn(&[n, 4], |_| rng.gen_range(-1.0..1.0));
        let pos = Tensor::from_fn(&[n, 4], |_| rng.gen_range(-1.0..1.0));
        let y = run_block(&store, &t, None, 2);
        let y_pos = run_block(&store, &t, Some(&pos), 2);
        let mut broken = 0;
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permute = |x: &Tensor| Tensor::from_fn(&[n, 4], |i| x.data()[perm[i / 4] * 4 + i % 4]);
            let yp = run_block(&store, &permute(&t), None, 2);
            assert!(yp.max_abs_diff(&permute(&y)) < 1e-12);
            // the same embedding stays attached to a position, not to a token
            let yp = run_block(&store, &permute(&t), Some(&pos), 2);
            if yp.max_abs_diff(&permute(&y_pos)) > 1e-6 && perm.iter().enumerate().any(|(i, &p)| i != p) {
                broken += 1;
            }
        }
        assert!(broken >= 9);
    }

    #[test]
    fn zero_init_former_is_identity() {
        let cfg = VpfConfig::default();
        let spec = BevGridSpec { channels: 4, ..BevGridSpec::default() };
        let mut store = ParamStore::new();
        init_vpf(&mut store, &cfg, &spec, 9);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(Tensor::from_fn(&[4, 64, 64], |_| rng.gen_range(-3.0..3.0)));
        let bev = BevFeatureMap { spec, var: x };
        let y = vpf_forward(&mut tape, &bev, &cfg, &p).unwrap();
        assert_eq!(tape.value(y.var), tape.value(x));
    }

    #[test]
    fn bad_head_count_is_config_error() {
        let cfg = VpfConfig { patch_size: 1, n_heads: 3, depth: 1, mlp_ratio: 4 };
        let spec = tiny_spec(4);
        let store = random_store(&cfg, &spec, 5, false);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(attention_maps(&mut tape, x, 3, "vpf.blocks.0.attn", &p), Err(TensorError::Contract(_))));
    }

    #[test]
    fn vpf_gradient_check() {
        let cfg = VpfConfig { patch_size: 2, n_heads: 2, depth: 1, mlp_ratio: 2 };
        let spec = BevGridSpec { x_min: 0.0, x_max: 4.0, y_min: 0.0, y_max: 4.0, resolution: 1.0, channels: 1 };
        let store = random_store(&cfg, &spec, 11, false);
        let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut inputs = vec![Tensor::from_fn(&[1, 4, 4], |_| rng.gen_range(-1.0..1.0))];
        inputs.extend(names.iter().map(|n| {
            let mut t = store.get(n).unwrap().clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
            t
        }));
        let r = grad_check(
            |tape, v| {
                let p = BoundParams::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
                Ok(vpf_forward(tape, &BevFeatureMap { spec, var: v[0] }, &cfg, &p)?.var)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
