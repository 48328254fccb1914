//! Two-stage cross-attention fusion between visual and textual sequences.
//!
//! Each element (pair / attr / obj) carries one visual token sequence and one
//! textual token stack. The inter stage exchanges information across
//! modalities within an element; the intra stage exchanges it across the two
//! primitive elements (with the pair fusing onto itself). Every arrow is a
//! residual cross-attention block with its own parameters — twelve arrows in
//! total (2 stages × 3 elements × 2 modalities) — so zeroed weights make any
//! fusion order collapse to the identity map.
//!
//! All arrows of a stage read the stage's *input* bundle, never each other's
//! outputs: updates within a stage are simultaneous.

use rand::Rng;

use crate::attention::{cross_attention_block, AttentionParams};
use crate::error::{Error, Result};
use crate::prompt::Element;
use crate::tensor::{Bindings, ParamId, ParamSet, Tape, Tensor};

// ── Configuration ───────────────────────────────────────────────────────────

/// Which fusion stages run, and in what order.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FusionOrder {
    NoFusion,
    IntraOnly,
    InterOnly,
    IntraThenInter,
    InterThenIntra,
}

impl FusionOrder {
    pub const ALL: [FusionOrder; 5] = [
        FusionOrder::NoFusion,
        FusionOrder::IntraOnly,
        FusionOrder::InterOnly,
        FusionOrder::IntraThenInter,
        FusionOrder::InterThenIntra,
    ];

    pub fn stages(self) -> &'static [Stage] {
        match self {
            FusionOrder::NoFusion => &[],
            FusionOrder::IntraOnly => &[Stage::Intra],
            FusionOrder::InterOnly => &[Stage::Inter],
            FusionOrder::IntraThenInter => &[Stage::Intra, Stage::Inter],
            FusionOrder::InterThenIntra => &[Stage::Inter, Stage::Intra],
        }
    }

    /// Identifier used in config files.
    pub fn key(self) -> &'static str {
        match self {
            FusionOrder::NoFusion => "none",
            FusionOrder::IntraOnly => "intra_only",
            FusionOrder::InterOnly => "inter_only",
            FusionOrder::IntraThenInter => "intra_inter",
            FusionOrder::InterThenIntra => "inter_intra",
        }
    }

    /// Row label used in the fusion-order study.
    pub fn label(self) -> &'static str {
        match self {
            FusionOrder::NoFusion => "No Fusion",
            FusionOrder::IntraOnly => "Intra-Fusion Only",
            FusionOrder::InterOnly => "Inter-Fusion Only",
            FusionOrder::IntraThenInter => "1. Intra 2. Inter",
            FusionOrder::InterThenIntra => "1. Inter 2. Intra",
        }
    }

    pub fn parse(s: &str) -> Result<FusionOrder> {
        FusionOrder::ALL
            .into_iter()
            .find(|o| o.key() == s)
            .ok_or_else(|| {
                let keys: Vec<&str> = FusionOrder::ALL.iter().map(|o| o.key()).collect();
                Error::Config(format!("unknown fusion order {s:?}; expected one of {keys:?}"))
            })
    }
}

/// How the intra stage picks its key/value features: across modalities
/// (`AsEquations`, the default) or within the query's own modality
/// (`AsProse`). Both keep the same element pairing — attr fuses with obj,
/// the pair with itself.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum IntraSemantics {
    AsEquations,
    AsProse,
}

impl IntraSemantics {
    pub fn key(self) -> &'static str {
        match self {
            IntraSemantics::AsEquations => "equations",
            IntraSemantics::AsProse => "prose",
        }
    }

    pub fn parse(s: &str) -> Result<IntraSemantics> {
        match s {
            "equations" => Ok(IntraSemantics::AsEquations),
            "prose" => Ok(IntraSemantics::AsProse),
            other => Err(Error::Config(format!(
                "unknown intra semantics {other:?}; expected \"equations\" or \"prose\""
            ))),
        }
    }
}

/// One fusion stage.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Inter,
    Intra,
}

impl Stage {
    pub fn key(self) -> &'static str {
        match self {
            Stage::Inter => "inter",
            Stage::Intra => "intra",
        }
    }
}

// ── Feature bundles ─────────────────────────────────────────────────────────

/// One element's pair of sequences: visual tokens and the textual stack.
#[derive(Clone)]
pub struct ElementFeatures {
    pub visual: Tensor,
    pub text: Tensor,
}

/// Features for whichever elements the experiment activates.
#[derive(Clone, Default)]
pub struct FeatureBundle {
    pub pair: Option<ElementFeatures>,
    pub attr: Option<ElementFeatures>,
    pub obj: Option<ElementFeatures>,
}

impl FeatureBundle {
    pub fn get(&self, element: Element) -> Option<&ElementFeatures> {
        match element {
            Element::Pair => self.pair.as_ref(),
            Element::Attr => self.attr.as_ref(),
            Element::Obj => self.obj.as_ref(),
        }
    }

    pub fn set(&mut self, element: Element, feats: Option<ElementFeatures>) {
        match element {
            Element::Pair => self.pair = feats,
            Element::Attr => self.attr = feats,
            Element::Obj => self.obj = feats,
        }
    }

    pub fn active(&self) -> Vec<Element> {
        Element::ALL.into_iter().filter(|e| self.get(*e).is_some()).collect()
    }
}

// ── Parameters ──────────────────────────────────────────────────────────────

/// The two arrows updating one element in one stage.
#[derive(Clone, Debug)]
pub struct ArrowPair {
    pub visual: AttentionParams,
    pub text: AttentionParams,
}

/// Six arrows of one stage: an [`ArrowPair`] per element.
#[derive(Clone, Debug)]
pub struct StageParams {
    arrows: [ArrowPair; 3],
}

impl StageParams {
    fn init(
        set: &mut ParamSet,
        stage: Stage,
        d: usize,
        n_heads: usize,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<StageParams> {
        let mut arrows = Vec::with_capacity(3);
        for element in Element::ALL {
            let prefix = |modality: &str| format!("fusion.{}.{}.{modality}", stage.key(), element.key());
            arrows.push(ArrowPair {
                visual: AttentionParams::init(set, &prefix("visual"), d, n_heads, sigma, rng)?,
                text: AttentionParams::init(set, &prefix("text"), d, n_heads, sigma, rng)?,
            });
        }
        let arrows: [ArrowPair; 3] = arrows.try_into().expect("three arrow pairs");
        Ok(StageParams { arrows })
    }

    pub fn arrow(&self, element: Element) -> &ArrowPair {
        match element {
            Element::Pair => &self.arrows[0],
            Element::Attr => &self.arrows[1],
            Element::Obj => &self.arrows[2],
        }
    }
}

/// All twelve fusion arrows.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub inter: StageParams,
    pub intra: StageParams,
}

impl FusionParams {
    pub fn init(
        set: &mut ParamSet,
        d: usize,
        n_heads: usize,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<FusionParams> {
        Ok(FusionParams {
            inter: StageParams::init(set, Stage::Inter, d, n_heads, sigma, rng)?,
            intra: StageParams::init(set, Stage::Intra, d, n_heads, sigma, rng)?,
        })
    }

    pub fn stage(&self, stage: Stage) -> &StageParams {
        match stage {
            Stage::Inter => &self.inter,
            Stage::Intra => &self.intra,
        }
    }

    /// Every projection matrix of every arrow.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(48);
        for stage in [&self.inter, &self.intra] {
            for element in Element::ALL {
                let arrow = stage.arrow(element);
                ids.extend(arrow.visual.ids());
                ids.extend(arrow.text.ids());
            }
        }
        ids
    }
}

// ── Stages ──────────────────────────────────────────────────────────────────

/// Cross-modal exchange within each element: the visual sequence queries the
/// element's own textual stack, and vice versa. Inactive elements pass
/// through unchanged.
pub fn inter_fuse(
    tape: &Tape,
    bindings: &Bindings,
    feats: &FeatureBundle,
    params: &StageParams,
) -> Result<FeatureBundle> {
    let mut out = FeatureBundle::default();
    for element in Element::ALL {
        let Some(f) = feats.get(element) else { continue };
        let arrow = params.arrow(element);
        out.set(
            element,
            Some(ElementFeatures {
                visual: cross_attention_block(tape, &f.visual, &f.text, &f.text, &arrow.visual.bound(bindings))?,
                text: cross_attention_block(tape, &f.text, &f.visual, &f.visual, &arrow.text.bound(bindings))?,
            }),
        );
    }
    Ok(out)
}

/// The element an intra arrow reads from: attr and obj exchange with each
/// other, the pair fuses onto itself.
pub fn intra_partner(element: Element) -> Element {
    match element {
        Element::Pair => Element::Pair,
        Element::Attr => Element::Obj,
        Element::Obj => Element::Attr,
    }
}

/// Cross-element exchange: attr fuses against obj and vice versa, the pair
/// against itself. `AsEquations` takes key/value from the partner's other
/// modality; `AsProse` from the partner's same modality. An element whose
/// partner is inactive passes through unchanged.
pub fn intra_fuse(
    tape: &Tape,
    bindings: &Bindings,
    feats: &FeatureBundle,
    params: &StageParams,
    semantics: IntraSemantics,
) -> Result<FeatureBundle> {
    let mut out = FeatureBundle::default();
    for element in Element::ALL {
        let Some(f) = feats.get(element) else { continue };
        let partner = intra_partner(element);
        let Some(p) = feats.get(partner) else {
            out.set(element, Some(f.clone()));
            continue;
        };
        let arrow = params.arrow(element);
        let (visual_kv, text_kv) = match semantics {
            IntraSemantics::AsEquations => (&p.text, &p.visual),
            IntraSemantics::AsProse => (&p.visual, &p.text),
        };
        out.set(
            element,
            Some(ElementFeatures {
                visual: cross_attention_block(tape, &f.visual, visual_kv, visual_kv, &arrow.visual.bound(bindings))?,
                text: cross_attention_block(tape, &f.text, text_kv, text_kv, &arrow.text.bound(bindings))?,
            }),
        );
    }
    Ok(out)
}

/// The bundle after one stage, kept so the loss can score every stage.
pub struct StageRecord {
    pub stage: Stage,
    pub bundle: FeatureBundle,
}

/// Run the configured stages in order. Returns the final bundle plus one
/// record per executed stage (empty for `NoFusion`, whose output is the
/// input itself).
pub fn run_fusion(
    tape: &Tape,
    bindings: &Bindings,
    feats: &FeatureBundle,
    order: FusionOrder,
    semantics: IntraSemantics,
    params: &FusionParams,
) -> Result<(FeatureBundle, Vec<StageRecord>)> {
    let mut current = feats.clone();
    let mut trace = Vec::new();
    for &stage in order.stages() {
        current = match stage {
            Stage::Inter => inter_fuse(tape, bindings, &current, params.stage(stage))?,
            Stage::Intra => intra_fuse(tape, bindings, &current, params.stage(stage), semantics)?,
        };
        trace.push(StageRecord { stage, bundle: current.clone() });
    }
    Ok((current, trace))
}
