//! Prompt construction for the three matching heads.
//!
//! A hard prompt is a frozen token template — `a photo of <state> <object>`
//! for pairs, `a photo of <label>` for single elements. A soft prompt swaps
//! the template for a trainable prefix of `p` embedding rows followed by the
//! frozen label embedding(s). `HardPlusSoft` keeps both: scores from the two
//! prompts are averaged at inference and both cross-entropies contribute
//! during training.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::space::CompositionSpace;
use crate::tensor::{Bindings, ParamId, ParamSet, Tape, Tensor};

/// Which matching head a prompt (or loss term, or fusion lane) belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Element {
    Pair,
    Attr,
    Obj,
}

impl Element {
    pub const ALL: [Element; 3] = [Element::Pair, Element::Attr, Element::Obj];

    pub fn key(self) -> &'static str {
        match self {
            Element::Pair => "pair",
            Element::Attr => "attr",
            Element::Obj => "obj",
        }
    }
}

/// Prompt family for one element.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PromptForm {
    Hard,
    Soft,
    HardPlusSoft,
}

impl PromptForm {
    pub const ALL: [PromptForm; 3] = [PromptForm::Hard, PromptForm::Soft, PromptForm::HardPlusSoft];

    /// The concrete prompt variants this form materializes.
    pub fn variants(self) -> &'static [BaseForm] {
        match self {
            PromptForm::Hard => &[BaseForm::Hard],
            PromptForm::Soft => &[BaseForm::Soft],
            PromptForm::HardPlusSoft => &[BaseForm::Hard, BaseForm::Soft],
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            PromptForm::Hard => "hard",
            PromptForm::Soft => "soft",
            PromptForm::HardPlusSoft => "hard_soft",
        }
    }
}

/// One concrete prompt variant.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BaseForm {
    Hard,
    Soft,
}

impl BaseForm {
    pub fn key(self) -> &'static str {
        match self {
            BaseForm::Hard => "hard",
            BaseForm::Soft => "soft",
        }
    }
}

const TEMPLATE_WORDS: [&str; 3] = ["a", "photo", "of"];

// ── Vocabulary ──────────────────────────────────────────────────────────────

/// Frozen embedding rows for every state, object and template word.
#[derive(Clone, Debug)]
pub struct TokenEmbeddingTable {
    pub d: usize,
    param: ParamId,
    index: BTreeMap<String, usize>,
}

impl TokenEmbeddingTable {
    /// Register one frozen `[vocab, d]` matrix drawn from `N(0, 1)`,
    /// covering the template words and every label of the space.
    pub fn init(
        set: &mut ParamSet,
        space: &CompositionSpace,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<TokenEmbeddingTable> {
        if d == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        let mut index = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for word in TEMPLATE_WORDS {
            order.push(word.to_string());
        }
        order.extend(space.states.iter().cloned());
        order.extend(space.objects.iter().cloned());
        for (i, token) in order.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "label {token:?} collides with another vocabulary entry"
                )));
            }
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let values: Vec<f64> = (0..order.len() * d).map(|_| normal.sample(rng)).collect();
        let param = set.add("vocab.embeddings", vec![order.len(), d], values, false)?;
        Ok(TokenEmbeddingTable { d, param, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// The embedding of one token as a `[1, d]` constant.
    pub fn row(&self, set: &ParamSet, token: &str) -> Result<Tensor> {
        let &i = self.index.get(token).ok_or_else(|| Error::Vocabulary(token.to_string()))?;
        let values = set.get(self.param).values[i * self.d..(i + 1) * self.d].to_vec();
        Tensor::constant([1, self.d], values)
    }

    pub fn param(&self) -> ParamId {
        self.param
    }
}

// ── Soft prefixes ───────────────────────────────────────────────────────────

/// Trainable `[p, d]` prefix owned by one element's soft prompt.
#[derive(Clone, Debug)]
pub struct SoftPrefix {
    pub element: Element,
    pub len: usize,
    pub param: ParamId,
}

impl SoftPrefix {
    /// Register a `N(0, 0.02^2)` prefix of `len` rows for `element`.
    pub fn init(
        set: &mut ParamSet,
        element: Element,
        len: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<SoftPrefix> {
        if len == 0 {
            return Err(Error::Config("soft prefix needs at least one row".into()));
        }
        let normal = Normal::new(0.0, 0.02).expect("prefix init sigma");
        let values: Vec<f64> = (0..len * d).map(|_| normal.sample(rng)).collect();
        let param = set.add(format!("prompt.soft_prefix.{}", element.key()), vec![len, d], values, true)?;
        Ok(SoftPrefix { element, len, param })
    }
}

// ── Prompt bank ─────────────────────────────────────────────────────────────

/// Everything needed to build any prompt of any element: the frozen
/// vocabulary plus one soft prefix per element. All three prefixes always
/// exist — the reference loss probes hard and soft prompts regardless of the
/// configured form.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub table: TokenEmbeddingTable,
    prefixes: [SoftPrefix; 3],
}

impl PromptBank {
    pub fn init(
        set: &mut ParamSet,
        space: &CompositionSpace,
        d: usize,
        prefix_len: usize,
        rng: &mut impl Rng,
    ) -> Result<PromptBank> {
        let table = TokenEmbeddingTable::init(set, space, d, rng)?;
        let prefixes = [
            SoftPrefix::init(set, Element::Pair, prefix_len, d, rng)?,
            SoftPrefix::init(set, Element::Attr, prefix_len, d, rng)?,
            SoftPrefix::init(set, Element::Obj, prefix_len, d, rng)?,
        ];
        Ok(PromptBank { table, prefixes })
    }

    pub fn prefix(&self, element: Element) -> &SoftPrefix {
        match element {
            Element::Pair => &self.prefixes[0],
            Element::Attr => &self.prefixes[1],
            Element::Obj => &self.prefixes[2],
        }
    }

    fn label_tokens<'a>(
        &self,
        space: &'a CompositionSpace,
        element: Element,
        class_id: usize,
    ) -> Result<Vec<&'a str>> {
        let check = |id: usize, count: usize, what: &str| -> Result<()> {
            if id >= count {
                return Err(Error::Contract(format!("{what} class {id} out of range ({count} classes)")));
            }
            Ok(())
        };
        Ok(match element {
            Element::Pair => {
                check(class_id, space.n_pairs(), "pair")?;
                vec![
                    space.states[space.state_of(class_id)].as_str(),
                    space.objects[space.object_of(class_id)].as_str(),
                ]
            }
            Element::Attr => {
                check(class_id, space.n_states(), "state")?;
                vec![space.states[class_id].as_str()]
            }
            Element::Obj => {
                check(class_id, space.n_objects(), "object")?;
                vec![space.objects[class_id].as_str()]
            }
        })
    }

    /// Frozen template prompt: `a photo of` + label embedding row(s).
    /// Length 5 for pairs, 4 for single elements.
    pub fn hard_seq(
        &self,
        tape: &Tape,
        set: &ParamSet,
        space: &CompositionSpace,
        element: Element,
        class_id: usize,
    ) -> Result<Tensor> {
        let labels = self.label_tokens(space, element, class_id)?;
        let mut rows: Vec<Tensor> = Vec::with_capacity(3 + labels.len());
        for word in TEMPLATE_WORDS {
            rows.push(self.table.row(set, word)?);
        }
        for label in labels {
            rows.push(self.table.row(set, label)?);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        tape.concat_rows(&refs)
    }

    /// Trainable prefix + frozen label embedding row(s). Length `p + 1` for
    /// single elements, `p + 2` for pairs. Gradient reaches only the prefix.
    pub fn soft_seq(
        &self,
        tape: &Tape,
        bindings: &Bindings,
        set: &ParamSet,
        space: &CompositionSpace,
        element: Element,
        class_id: usize,
    ) -> Result<Tensor> {
        let labels = self.label_tokens(space, element, class_id)?;
        let prefix = bindings.tensor(self.prefix(element).param);
        let mut rows: Vec<Tensor> = vec![prefix.clone()];
        for label in labels {
            rows.push(self.table.row(set, label)?);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        tape.concat_rows(&refs)
    }

    /// One sequence per (class, variant) for a whole class list.
    pub fn class_prompts(
        &self,
        tape: &Tape,
        bindings: &Bindings,
        set: &ParamSet,
        space: &CompositionSpace,
        element: Element,
        form: PromptForm,
        class_ids: &[usize],
    ) -> Result<Vec<ClassPrompts>> {
        class_ids
            .iter()
            .map(|&class_id| {
                let seqs = form
                    .variants()
                    .iter()
                    .map(|&variant| {
                        let seq = match variant {
                            BaseForm::Hard => self.hard_seq(tape, set, space, element, class_id)?,
                            BaseForm::Soft => {
                                self.soft_seq(tape, bindings, set, space, element, class_id)?
                            }
                        };
                        Ok((variant, seq))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClassPrompts { class_id, seqs })
            })
            .collect()
    }

    /// Token count of one prompt variant for an element.
    pub fn seq_len(&self, element: Element, variant: BaseForm) -> usize {
        let labels = if element == Element::Pair { 2 } else { 1 };
        match variant {
            BaseForm::Hard => TEMPLATE_WORDS.len() + labels,
            BaseForm::Soft => self.prefix(element).len + labels,
        }
    }
}

/// All prompt sequences of one class under one form.
pub struct ClassPrompts {
    pub class_id: usize,
    pub seqs: Vec<(BaseForm, Tensor)>,
}
