//! Model assembly: every learnable parameter, its initialization, and the
//! per-document registration that binds the parameter store onto a fresh
//! tape as the typed bundles the pipeline modules consume.

use crate::decoder::{MhaVars, MlpVars};
use crate::diffcore::{ParamGroup, ParamStore, Tape, Var};
use crate::encoder::{BioVars, EncoderVars};
use crate::proxygraph::{FilmEdgeVars, FilmVars};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const PROXY_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_emb: usize,
    pub d_h: usize,
    pub n_proxies: usize,
    pub heads: usize,
    /// Event-type classes including null.
    pub type_classes: usize,
    /// Argument-role classes including null.
    pub role_classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2
            || self.d_emb == 0
            || self.d_h == 0
            || self.n_proxies == 0
            || self.heads == 0
            || self.type_classes < 2
            || self.role_classes < 2
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_h % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention heads ({}) must divide d_h ({})",
                self.heads, self.d_h
            )));
        }
        Ok(())
    }
}

/// Structural variants: the proxy bank may collapse to one shared embedding
/// and the FiLM hyper-weights may be dropped (gamma = 1, beta = 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelStructure {
    pub hypernetwork: bool,
    pub distinct_proxies: bool,
}

impl Default for ModelStructure {
    fn default() -> Self {
        ModelStructure {
            hypernetwork: true,
            distinct_proxies: true,
        }
    }
}

/// The trained model: dimensions, structure flags, and the parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub dims: ModelDims,
    pub structure: ModelStructure,
    pub store: ParamStore,
}

/// Tape handles for one document forward pass, aligned with the store.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub bio: BioVars,
    pub epc: MlpVars,
    /// (n, d_h) proxy bank on the tape (broadcast from the shared embedding
    /// when `distinct_proxies` is off).
    pub proxies: Var,
    pub film: FilmVars,
    pub etype: MlpVars,
    pub mha: MhaVars,
    pub arg: MlpVars,
    /// One var per store parameter, in store order, for gradient harvest.
    pub all: Vec<Var>,
}

enum Init {
    Zeros,
    Normal(f64),
    Xavier,
}

fn init_values(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Xavier => {
            let (fan_in, fan_out) = match shape {
                [a, b] => (*a, *b),
                [a] => (*a, *a),
                _ => (n, n),
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
    }
}

impl Model {
    /// Builds a model with seeded initialization. Parameter creation order
    /// is fixed, so a given (dims, structure, seed) always produces the
    /// same values.
    pub fn init(dims: ModelDims, structure: ModelStructure, seed: u64) -> Result<Model> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut add = |store: &mut ParamStore,
                       name: &str,
                       shape: Vec<usize>,
                       init: Init,
                       group: ParamGroup|
         -> Result<()> {
            let data = init_values(&mut rng, &shape, init);
            store.add(name, shape, data, group)?;
            Ok(())
        };
        let d_emb = dims.d_emb;
        let d_h = dims.d_h;
        use ParamGroup::{Encoder, Rest};
        add(
            &mut store,
            "embed.table",
            vec![dims.vocab, d_emb],
            Init::Normal(PROXY_INIT_STD),
            Encoder,
        )?;
        add(&mut store, "enc.w", vec![2 * d_emb, d_h], Init::Xavier, Encoder)?;
        add(&mut store, "enc.b", vec![d_h], Init::Zeros, Encoder)?;
        add(&mut store, "bio.w", vec![d_h, 3], Init::Xavier, Encoder)?;
        add(&mut store, "bio.b", vec![3], Init::Zeros, Encoder)?;
        add(&mut store, "epc.w1", vec![2 * d_h, d_h], Init::Xavier, Encoder)?;
        add(&mut store, "epc.b1", vec![d_h], Init::Zeros, Encoder)?;
        add(&mut store, "epc.w2", vec![d_h, 1], Init::Xavier, Encoder)?;
        add(&mut store, "epc.b2", vec![1], Init::Zeros, Encoder)?;
        if structure.distinct_proxies {
            add(
                &mut store,
                "proxy.embed",
                vec![dims.n_proxies, d_h],
                Init::Normal(PROXY_INIT_STD),
                Rest,
            )?;
        } else {
            add(
                &mut store,
                "proxy.shared",
                vec![d_h],
                Init::Normal(PROXY_INIT_STD),
                Rest,
            )?;
        }
        for edge in ["pp", "ep", "cp"] {
            add(
                &mut store,
                &format!("film.{}.w", edge),
                vec![d_h, d_h],
                Init::Xavier,
                Rest,
            )?;
            if structure.hypernetwork {
                add(
                    &mut store,
                    &format!("film.{}.gamma", edge),
                    vec![d_h, d_h],
                    Init::Xavier,
                    Rest,
                )?;
                add(
                    &mut store,
                    &format!("film.{}.beta", edge),
                    vec![d_h, d_h],
                    Init::Xavier,
                    Rest,
                )?;
            }
        }
        add(&mut store, "etype.w1", vec![d_h, d_h], Init::Xavier, Rest)?;
        add(&mut store, "etype.b1", vec![d_h], Init::Zeros, Rest)?;
        add(
            &mut store,
            "etype.w2",
            vec![d_h, dims.type_classes],
            Init::Xavier,
            Rest,
        )?;
        add(&mut store, "etype.b2", vec![dims.type_classes], Init::Zeros, Rest)?;
        for name in ["mha.wq", "mha.wk", "mha.wv", "mha.wo"] {
            add(&mut store, name, vec![d_h, d_h], Init::Xavier, Rest)?;
        }
        add(&mut store, "arg.w1", vec![2 * d_h, d_h], Init::Xavier, Rest)?;
        add(&mut store, "arg.b1", vec![d_h], Init::Zeros, Rest)?;
        add(
            &mut store,
            "arg.w2",
            vec![d_h, dims.role_classes],
            Init::Xavier,
            Rest,
        )?;
        add(&mut store, "arg.b2", vec![dims.role_classes], Init::Zeros, Rest)?;
        Ok(Model {
            dims,
            structure,
            store,
        })
    }

    /// Zero-valued variant, used in tests for closed-form cases.
    pub fn zeros(dims: ModelDims, structure: ModelStructure) -> Result<Model> {
        let mut model = Model::init(dims, structure, 0)?;
        for p in model.store.iter_mut() {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(model)
    }

    /// Replaces parameter values with a loaded checkpoint, requiring an
    /// exact name/shape match.
    pub fn load_values(&mut self, loaded: &ParamStore) -> Result<()> {
        crate::diffcore::apply_checkpoint(&mut self.store, loaded)
    }

    fn var_of(&self, vars: &[Var], name: &str) -> Var {
        let idx = self
            .store
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("parameter {} missing", name));
        vars[idx]
    }

    /// Registers every parameter on the tape and assembles the typed
    /// bundles used by the pipeline.
    pub fn register(&self, tape: &mut Tape) -> Result<ModelVars> {
        let all = self.store.register_all(tape)?;
        let v = |name: &str| self.var_of(&all, name);
        let proxies = if self.structure.distinct_proxies {
            v("proxy.embed")
        } else {
            tape.repeat_row(v("proxy.shared"), self.dims.n_proxies)?
        };
        let film_edge = |edge: &str| FilmEdgeVars {
            w: v(&format!("film.{}.w", edge)),
            gamma: self
                .structure
                .hypernetwork
                .then(|| v(&format!("film.{}.gamma", edge))),
            beta: self
                .structure
                .hypernetwork
                .then(|| v(&format!("film.{}.beta", edge))),
        };
        Ok(ModelVars {
            encoder: EncoderVars {
                embed: v("embed.table"),
                w: v("enc.w"),
                b: v("enc.b"),
            },
            bio: BioVars {
                w: v("bio.w"),
                b: v("bio.b"),
            },
            epc: MlpVars {
                w1: v("epc.w1"),
                b1: v("epc.b1"),
                w2: v("epc.w2"),
                b2: v("epc.b2"),
            },
            proxies,
            film: FilmVars {
                edges: [film_edge("pp"), film_edge("ep"), film_edge("cp")],
            },
            etype: MlpVars {
                w1: v("etype.w1"),
                b1: v("etype.b1"),
                w2: v("etype.w2"),
                b2: v("etype.b2"),
            },
            mha: MhaVars {
                wq: v("mha.wq"),
                wk: v("mha.wk"),
                wv: v("mha.wv"),
                wo: v("mha.wo"),
                heads: self.dims.heads,
            },
            arg: MlpVars {
                w1: v("arg.w1"),
                b1: v("arg.b1"),
                w2: v("arg.w2"),
                b2: v("arg.b2"),
            },
            all,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 10,
            d_emb: 4,
            d_h: 8,
            n_proxies: 3,
            heads: 2,
            type_classes: 3,
            role_classes: 4,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(dims(), ModelStructure::default(), 7).unwrap();
        let b = Model::init(dims(), ModelStructure::default(), 7).unwrap();
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.data, pb.data, "{}", pa.name);
        }
        let c = Model::init(dims(), ModelStructure::default(), 8).unwrap();
        assert!(a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|(pa, pc)| pa.data != pc.data));
    }

    #[test]
    fn heads_must_divide_hidden_size() {
        let mut d = dims();
        d.heads = 3;
        assert!(Model::init(d, ModelStructure::default(), 0).is_err());
    }

    #[test]
    fn shared_proxy_structure_swaps_parameter() {
        let shared = Model::init(
            dims(),
            ModelStructure {
                distinct_proxies: false,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(shared.store.by_name("proxy.shared").is_some());
        assert!(shared.store.by_name("proxy.embed").is_none());
        let mut tape = Tape::new();
        let vars = shared.register(&mut tape).unwrap();
        assert_eq!(tape.shape(vars.proxies), &[3, 8]);
        let v = tape.value(vars.proxies);
        assert_eq!(v[0..8], v[8..16]);
        assert_eq!(v[0..8], v[16..24]);
    }

    #[test]
    fn no_hypernetwork_drops_gamma_beta() {
        let m = Model::init(
            dims(),
            ModelStructure {
                hypernetwork: false,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(m.store.by_name("film.pp.gamma").is_none());
        assert!(m.store.by_name("film.pp.w").is_some());
        let mut tape = Tape::new();
        let vars = m.register(&mut tape).unwrap();
        assert!(vars.film.edges[0].gamma.is_none());
    }

    #[test]
    fn register_aligns_with_store_order() {
        let m = Model::init(dims(), ModelStructure::default(), 1).unwrap();
        let mut tape = Tape::new();
        let vars = m.register(&mut tape).unwrap();
        assert_eq!(vars.all.len(), m.store.len());
        for (p, &v) in m.store.iter().zip(&vars.all) {
            assert_eq!(tape.shape(v), p.shape.as_slice());
            assert_eq!(tape.value(v), p.data.as_slice());
        }
    }
}
