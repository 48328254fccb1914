//! Toy text and image encoders.
//!
//! Both encoders are small random networks frozen at construction; all
//! learning happens in the prompts, the fusion blocks, and the three visual
//! heads. The text encoder mixes a prompt sequence into token features and
//! pools them into one matching vector. The image encoder lifts a raw
//! feature vector into a four-token grid; each element (pair/attr/obj) views
//! that grid through its own trainable head, and pooled matching vectors are
//! row means of the head-projected grid.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::prompt::Element;
use crate::tensor::{Bindings, ParamId, ParamSet, Tape, Tensor};

/// Number of visual tokens the image backbone produces.
pub const GRID_TOKENS: usize = 4;

fn frozen_matrix(
    set: &mut ParamSet,
    name: &str,
    rows: usize,
    cols: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    let normal = Normal::new(0.0, sigma).expect("encoder init sigma");
    let values: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    set.add(name, vec![rows, cols], values, false)
}

// ── Text encoder ────────────────────────────────────────────────────────────

/// Frozen token mixer + frozen pooling projection.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub d: usize,
    mixing: ParamId,
    projection: ParamId,
}

/// Token features plus the pooled matching vector of one prompt.
pub struct TextEncoding {
    pub tokens: Tensor,
    pub pooled: Tensor,
}

impl TextEncoder {
    pub fn init(set: &mut ParamSet, d: usize, rng: &mut impl Rng) -> Result<TextEncoder> {
        if d == 0 {
            return Err(Error::Config("text encoder width must be positive".into()));
        }
        let sigma = 1.0 / (d as f64).sqrt();
        let mixing = frozen_matrix(set, "text.mixing", d, d, sigma, rng)?;
        let projection = frozen_matrix(set, "text.projection", d, d, sigma, rng)?;
        Ok(TextEncoder { d, mixing, projection })
    }

    /// Token features `tanh(seq · mixing)` and their pooled projection.
    pub fn encode(
        &self,
        tape: &Tape,
        bindings: &Bindings,
        seq: &Tensor,
    ) -> Result<TextEncoding> {
        let tokens = tape.tanh(&tape.matmul(seq, bindings.tensor(self.mixing))?);
        let pooled = self.pool(tape, bindings, &tokens)?;
        Ok(TextEncoding { tokens, pooled })
    }

    /// Mean over token rows, then the frozen projection — the same path is
    /// reused to re-pool fused token sequences.
    pub fn pool(&self, tape: &Tape, bindings: &Bindings, tokens: &Tensor) -> Result<Tensor> {
        self.project(tape, bindings, &tape.mean_rows(tokens)?)
    }

    /// The frozen projection alone, for rows that are already per-class
    /// means (block-pooled stacks).
    pub fn project(&self, tape: &Tape, bindings: &Bindings, rows: &Tensor) -> Result<Tensor> {
        tape.matmul(rows, bindings.tensor(self.projection))
    }

    pub fn frozen_ids(&self) -> [ParamId; 2] {
        [self.mixing, self.projection]
    }
}

// ── Image encoder ───────────────────────────────────────────────────────────

/// Frozen backbone + grid projection, with one trainable head per element.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub d_in: usize,
    pub d: usize,
    backbone: ParamId,
    grid_proj: ParamId,
    heads: [ParamId; 3],
}

impl ImageEncoder {
    /// `d` must be divisible by the grid size so the backbone output splits
    /// into tokens. Heads start at identity plus small noise so every
    /// element's matching vector is non-degenerate from the first step.
    pub fn init(set: &mut ParamSet, d_in: usize, d: usize, rng: &mut impl Rng) -> Result<ImageEncoder> {
        if d == 0 || d % GRID_TOKENS != 0 {
            return Err(Error::Config(format!(
                "feature width {d} must be a positive multiple of {GRID_TOKENS}"
            )));
        }
        if d_in == 0 {
            return Err(Error::Config("raw input width must be positive".into()));
        }
        let backbone = frozen_matrix(set, "image.backbone", d_in, d, 1.0 / (d_in as f64).sqrt(), rng)?;
        let grid_proj = frozen_matrix(
            set,
            "image.grid_proj",
            d / GRID_TOKENS,
            d,
            1.0 / ((d / GRID_TOKENS) as f64).sqrt(),
            rng,
        )?;
        let noise = Normal::new(0.0, 0.02).expect("head init sigma");
        let mut heads = Vec::with_capacity(3);
        for element in Element::ALL {
            let values: Vec<f64> = (0..d * d)
                .map(|i| {
                    let eye = if i / d == i % d { 1.0 } else { 0.0 };
                    eye + noise.sample(rng)
                })
                .collect();
            heads.push(set.add(format!("image.head.{}", element.key()), vec![d, d], values, true)?);
        }
        let heads: [ParamId; 3] = heads.try_into().expect("three heads");
        Ok(ImageEncoder { d_in, d, backbone, grid_proj, heads })
    }

    pub fn head(&self, element: Element) -> ParamId {
        match element {
            Element::Pair => self.heads[0],
            Element::Attr => self.heads[1],
            Element::Obj => self.heads[2],
        }
    }

    /// Raw feature `[1, d_in]` → token grid `[GRID_TOKENS, d]`:
    /// `tanh(x · backbone)` split into tokens of `d/G`, each re-projected.
    pub fn encode(&self, tape: &Tape, bindings: &Bindings, x: &Tensor) -> Result<Tensor> {
        if x.shape() != [1, self.d_in] {
            return Err(Error::Contract(format!(
                "image input shape {:?} does not match [1, {}]",
                x.shape(),
                self.d_in
            )));
        }
        let hidden = tape.tanh(&tape.matmul(x, bindings.tensor(self.backbone))?);
        let split = tape.reshape(&hidden, [GRID_TOKENS, self.d / GRID_TOKENS])?;
        tape.matmul(&split, bindings.tensor(self.grid_proj))
    }

    /// The grid as seen by one element: every token row through that
    /// element's head. This is what fusion consumes on the visual side.
    pub fn element_seq(
        &self,
        tape: &Tape,
        bindings: &Bindings,
        element: Element,
        grid: &Tensor,
    ) -> Result<Tensor> {
        tape.matmul(grid, bindings.tensor(self.head(element)))
    }

    /// Pooled matching vector: mean over the token rows of a (possibly
    /// fused) element sequence.
    pub fn pool(&self, tape: &Tape, seq: &Tensor) -> Result<Tensor> {
        tape.mean_rows(seq)
    }

    pub fn frozen_ids(&self) -> [ParamId; 2] {
        [self.backbone, self.grid_proj]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{stream_rng, streams};
    use crate::prompt::PromptBank;
    use crate::space::generate_space;
    use crate::tensor::bind;
    use rand::Rng;

    const D_IN: usize = 32;
    const D: usize = 16;

    fn encoders(seed: u64) -> (ParamSet, TextEncoder, ImageEncoder) {
        let mut set = ParamSet::new();
        let mut rng = stream_rng(seed, streams::INIT);
        let text = TextEncoder::init(&mut set, D, &mut rng).unwrap();
        let image = ImageEncoder::init(&mut set, D_IN, D, &mut rng).unwrap();
        (set, text, image)
    }

    fn random_row(rng: &mut impl Rng, n: usize) -> Tensor {
        Tensor::constant([1, n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_token_pool_equals_that_tokens_projection() {
        let (set, text, _) = encoders(0);
        let tape = Tape::new();
        let bindings = bind(&tape, &set, false).unwrap();
        let mut rng = stream_rng(1, streams::NOISE);
        let seq = random_row(&mut rng, D);
        let enc = text.encode(&tape, &bindings, &seq).unwrap();
        assert_eq!(enc.tokens.shape(), &[1, D]);
        let direct = tape.matmul(&enc.tokens, bindings.tensor(text.frozen_ids()[1])).unwrap();
        assert_eq!(enc.pooled.values(), direct.values());
    }

    #[test]
    fn pooled_text_is_invariant_to_token_order() {
        let (set, text, _) = encoders(0);
        let tape = Tape::new();
        let bindings = bind(&tape, &set, false).unwrap();
        let mut rng = stream_rng(2, streams::NOISE);
        let rows: Vec<Tensor> = (0..3).map(|_| random_row(&mut rng, D)).collect();
        let fwd = tape.concat_rows(&[&rows[0], &rows[1], &rows[2]]).unwrap();
        let rev = tape.concat_rows(&[&rows[2], &rows[0], &rows[1]]).unwrap();
        let a = text.encode(&tape, &bindings, &fwd).unwrap().pooled;
        let b = text.encode(&tape, &bindings, &rev).unwrap().pooled;
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_soft_prefix_through_text_encoder() {
        let space = generate_space(4, 5).unwrap();
        let mut set = ParamSet::new();
        let mut rng = stream_rng(3, streams::INIT);
        let bank = PromptBank::init(&mut set, &space, D, 3, &mut rng).unwrap();
        let text = TextEncoder::init(&mut set, D, &mut rng).unwrap();
        let tape = Tape::new();
        let bindings = bind(&tape, &set, true).unwrap();
        let seq = bank.soft_seq(&tape, &bindings, &set, &space, Element::Pair, 0).unwrap();
        let enc = text.encode(&tape, &bindings, &seq).unwrap();
        let loss = tape.sum(&enc.pooled);
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(bindings.tensor(bank.prefix(Element::Pair).param)).unwrap();
        assert!(g.iter().any(|v| v.abs() > 1e-12), "prefix gradient must be nonzero");
    }

    #[test]
    fn grid_has_four_tokens_and_zero_heads_zero_the_matching_vector() {
        let (mut set, _, image) = encoders(0);
        for element in Element::ALL {
            let head = set.get_mut(image.head(element));
            head.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let bindings = bind(&tape, &set, false).unwrap();
        let zero = Tensor::constant([1, D_IN], vec![0.0; D_IN]).unwrap();
        let grid = image.encode(&tape, &bindings, &zero).unwrap();
        assert_eq!(grid.shape(), &[GRID_TOKENS, D]);
        assert!(grid.values().iter().all(|v| *v == 0.0), "zero input gives a zero grid");
        for element in Element::ALL {
            let seq = image.element_seq(&tape, &bindings, element, &grid).unwrap();
            let v = image.pool(&tape, &seq).unwrap();
            assert!(v.values().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn distinct_inputs_produce_distinct_grids() {
        let (set, _, image) = encoders(0);
        let tape = Tape::new();
        let bindings = bind(&tape, &set, false).unwrap();
        let mut rng = stream_rng(4, streams::NOISE);
        let mut grids: Vec<Vec<f64>> = Vec::new();
        for _ in 0..100 {
            let x = random_row(&mut rng, D_IN);
            let grid = image.encode(&tape, &bindings, &x).unwrap();
            grids.push(grid.values().to_vec());
        }
        for i in 0..grids.len() {
            for j in (i + 1)..grids.len() {
                assert_ne!(grids[i], grids[j], "grid collision between inputs {i} and {j}");
            }
        }
    }

    #[test]
    fn head_gradients_flow_and_frozen_parts_collect_none() {
        let (set, text, image) = encoders(0);
        let tape = Tape::new();
        let bindings = bind(&tape, &set, true).unwrap();
        let mut rng = stream_rng(5, streams::NOISE);
        let x = random_row(&mut rng, D_IN);
        let grid = image.encode(&tape, &bindings, &x).unwrap();
        let seq = image.element_seq(&tape, &bindings, Element::Attr, &grid).unwrap();
        let loss = tape.sum(&image.pool(&tape, &seq).unwrap());
        let grads = tape.backward(&loss).unwrap();
        let head_grad = grads.wrt(bindings.tensor(image.head(Element::Attr))).unwrap();
        assert!(head_grad.iter().any(|v| v.abs() > 1e-12));
        for id in image.frozen_ids().into_iter().chain(text.frozen_ids()) {
            assert!(grads.wrt(bindings.tensor(id)).is_none(), "frozen parts must stay gradient-free");
        }
    }

    #[test]
    fn pooling_an_unfused_element_seq_matches_head_after_mean() {
        // mean(grid · head) and mean(grid) · head agree analytically; the
        // computed values agree to rounding.
        let (set, _, image) = encoders(0);
        let tape = Tape::new();
        let bindings = bind(&tape, &set, false).unwrap();
        let mut rng = stream_rng(6, streams::NOISE);
        let x = random_row(&mut rng, D_IN);
        let grid = image.encode(&tape, &bindings, &x).unwrap();
        let seq = image.element_seq(&tape, &bindings, Element::Pair, &grid).unwrap();
        let a = image.pool(&tape, &seq).unwrap();
        let mean_first = tape.mean_rows(&grid).unwrap();
        let b = tape.matmul(&mean_first, bindings.tensor(image.head(Element::Pair))).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encoders_are_deterministic_in_the_seed() {
        let (set_a, _, _) = encoders(9);
        let (set_b, _, _) = encoders(9);
        let (set_c, _, _) = encoders(10);
        for name in ["text.mixing", "image.backbone", "image.head.pair"] {
            let a = &set_a.get(set_a.by_name(name).unwrap()).values;
            let b = &set_b.get(set_b.by_name(name).unwrap()).values;
            let c = &set_c.get(set_c.by_name(name).unwrap()).values;
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn widths_not_divisible_by_the_grid_are_rejected() {
        let mut set = ParamSet::new();
        let mut rng = stream_rng(0, streams::INIT);
        assert!(matches!(
            ImageEncoder::init(&mut set, D_IN, 18, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
