//! The heterogeneous graph over proxy, entity, and context nodes, and the
//! one-layer FiLM-modulated message-passing update of the proxy vectors.
//!
//! Every proxy receives edges from all proxies (including itself), all
//! entity mentions, and all sentence contexts. Messages of edge type e are
//! W_e h_u, modulated per target v by gamma_{e,v} = Wg_e h_v and shifted by
//! beta_{e,v} = Wb_e h_v, one beta per incoming edge; the sum passes through
//! GELU. Entity and context vectors are read, never written.

use crate::diffcore::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeType {
    ProxyProxy = 0,
    EntityProxy = 1,
    ContextProxy = 2,
}

pub const EDGE_TYPES: [EdgeType; 3] = [
    EdgeType::ProxyProxy,
    EdgeType::EntityProxy,
    EdgeType::ContextProxy,
];

/// Node vectors plus the three typed edge sets. Edges are stored as
/// (source index within the source class, target proxy index).
pub struct HeteroGraph {
    pub n_proxies: usize,
    /// (n, d) initial proxy vectors.
    pub proxies: Var,
    /// (|e|, d) mention vectors; absent when the document has no entities.
    pub entities: Option<Var>,
    /// (|s|, d) per-sentence context vectors.
    pub contexts: Var,
    pub edges: [Vec<(usize, usize)>; 3],
}

/// Per-edge-type weights. `gamma`/`beta` hyper-weights are absent in the
/// shared-message (no-hypernetwork) ablation, where gamma = 1 and beta = 0.
#[derive(Debug, Clone, Copy)]
pub struct FilmEdgeVars {
    pub w: Var,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct FilmVars {
    pub edges: [FilmEdgeVars; 3],
}

/// Builds the complete heterogeneous graph.
pub fn build_graph(
    tape: &mut Tape,
    proxies: Var,
    mention_vectors: &[Var],
    context_vectors: &[Var],
) -> Result<HeteroGraph> {
    let shape = tape.shape(proxies);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Config(format!(
            "proxy bank must be a nonempty matrix, got shape {:?}",
            shape
        )));
    }
    let n = shape[0];
    if context_vectors.is_empty() {
        return Err(Error::Config("graph needs at least one context node".into()));
    }
    let entities = if mention_vectors.is_empty() {
        None
    } else {
        Some(tape.stack_rows(mention_vectors)?)
    };
    let contexts = tape.stack_rows(context_vectors)?;

    let mut pp = Vec::with_capacity(n * n);
    for src in 0..n {
        for tgt in 0..n {
            pp.push((src, tgt));
        }
    }
    let mut ep = Vec::with_capacity(mention_vectors.len() * n);
    for src in 0..mention_vectors.len() {
        for tgt in 0..n {
            ep.push((src, tgt));
        }
    }
    let mut cp = Vec::with_capacity(context_vectors.len() * n);
    for src in 0..context_vectors.len() {
        for tgt in 0..n {
            cp.push((src, tgt));
        }
    }
    Ok(HeteroGraph {
        n_proxies: n,
        proxies,
        entities,
        contexts,
        edges: [pp, ep, cp],
    })
}

/// One FiLM layer over the graph, returning the updated (n, d) proxy
/// matrix. Neighbor aggregation is a plain sum; sources are canonicalized
/// by index so edge-list order never affects the result.
pub fn film_layer(tape: &mut Tape, graph: &HeteroGraph, vars: FilmVars) -> Result<Var> {
    let n = graph.n_proxies;
    let d = tape.shape(graph.proxies)[1];
    let mut total: Option<Var> = None;
    for &edge_type in &EDGE_TYPES {
        let source_matrix = match edge_type {
            EdgeType::ProxyProxy => Some(graph.proxies),
            EdgeType::EntityProxy => graph.entities,
            EdgeType::ContextProxy => Some(graph.contexts),
        };
        let edges = &graph.edges[edge_type as usize];
        let (source_matrix, has_edges) = match source_matrix {
            Some(m) if !edges.is_empty() => (m, true),
            _ => (graph.proxies, false),
        };
        if !has_edges {
            continue;
        }
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(src, tgt) in edges {
            if tgt >= n {
                return Err(Error::index(
                    "film_layer",
                    format!("edge targets proxy {} of {}", tgt, n),
                ));
            }
            incoming[tgt].push(src);
        }
        let mut sum_rows = Vec::with_capacity(n);
        let mut degrees = Vec::with_capacity(n);
        for sources in incoming.iter_mut() {
            sources.sort_unstable();
            degrees.push(sources.len() as f64);
            if sources.is_empty() {
                sum_rows.push(tape.input(vec![0.0; d], vec![d])?);
            } else {
                let gathered = tape.gather_rows(source_matrix, sources)?;
                sum_rows.push(tape.sum_rows(gathered)?);
            }
        }
        let neighbor_sums = tape.stack_rows(&sum_rows)?;
        let messages = tape.matmul(neighbor_sums, vars.edges[edge_type as usize].w)?;
        let mut term = match vars.edges[edge_type as usize].gamma {
            Some(wg) => {
                let gamma = tape.matmul(graph.proxies, wg)?;
                tape.mul(gamma, messages)?
            }
            None => messages,
        };
        if let Some(wb) = vars.edges[edge_type as usize].beta {
            let beta = tape.matmul(graph.proxies, wb)?;
            let beta_per_edge = tape.scale_rows(beta, degrees)?;
            term = tape.add(term, beta_per_edge)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Config("graph has no edges".into()))?;
    Ok(tape.gelu(total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape, values: &[f64]) -> Var {
        tape.input(values.to_vec(), vec![values.len()]).unwrap()
    }

    fn mat_var(tape: &mut Tape, rows: usize, cols: usize, values: &[f64]) -> Var {
        tape.input(values.to_vec(), vec![rows, cols]).unwrap()
    }

    #[test]
    fn edge_counts_small_graph() {
        let mut tape = Tape::new();
        let proxies = mat_var(&mut tape, 2, 3, &[0.0; 6]);
        let m = vec_var(&mut tape, &[0.0; 3]);
        let c = vec_var(&mut tape, &[0.0; 3]);
        let g = build_graph(&mut tape, proxies, &[m], &[c]).unwrap();
        assert_eq!(g.edges[EdgeType::ProxyProxy as usize].len(), 4);
        assert_eq!(g.edges[EdgeType::EntityProxy as usize].len(), 2);
        assert_eq!(g.edges[EdgeType::ContextProxy as usize].len(), 2);
        // self-loops present
        assert!(g.edges[0].contains(&(0, 0)) && g.edges[0].contains(&(1, 1)));
    }

    #[test]
    fn edge_counts_no_entities() {
        let mut tape = Tape::new();
        let proxies = mat_var(&mut tape, 16, 2, &[0.0; 32]);
        let contexts: Vec<Var> = (0..3).map(|_| vec_var(&mut tape, &[0.0; 2])).collect();
        let g = build_graph(&mut tape, proxies, &[], &contexts).unwrap();
        assert_eq!(g.edges[0].len(), 256);
        assert_eq!(g.edges[1].len(), 0);
        assert_eq!(g.edges[2].len(), 48);
        assert!(g.entities.is_none());
    }

    #[test]
    fn entity_edges_scale_with_mentions() {
        let mut tape = Tape::new();
        let n = 4;
        let proxies = mat_var(&mut tape, n, 2, &[0.0; 8]);
        let mentions: Vec<Var> = (0..9).map(|_| vec_var(&mut tape, &[0.0; 2])).collect();
        let c = vec_var(&mut tape, &[0.0; 2]);
        let g = build_graph(&mut tape, proxies, &mentions, &[c]).unwrap();
        assert_eq!(g.edges[EdgeType::EntityProxy as usize].len(), 9 * n);
    }

    #[test]
    fn zero_proxies_is_config_error() {
        let mut tape = Tape::new();
        let proxies = mat_var(&mut tape, 0, 2, &[]);
        let c = vec_var(&mut tape, &[0.0; 2]);
        assert!(build_graph(&mut tape, proxies, &[], &[c]).is_err());
    }

    fn scalar_film_vars(tape: &mut Tape, w: f64, hyper: bool) -> FilmVars {
        let mk = |tape: &mut Tape| tape.input(vec![w], vec![1, 1]).unwrap();
        let mut edges = Vec::new();
        for _ in 0..3 {
            let wv = mk(tape);
            let (gamma, beta) = if hyper {
                (Some(mk(tape)), Some(mk(tape)))
            } else {
                (None, None)
            };
            edges.push(FilmEdgeVars { w: wv, gamma, beta });
        }
        FilmVars {
            edges: [edges[0], edges[1], edges[2]],
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut tape = Tape::new();
        let proxies = mat_var(&mut tape, 2, 1, &[3.0, -1.0]);
        let m = vec_var(&mut tape, &[2.0]);
        let c = vec_var(&mut tape, &[1.0]);
        let g = build_graph(&mut tape, proxies, &[m], &[c]).unwrap();
        let vars = scalar_film_vars(&mut tape, 0.0, true);
        let out = film_layer(&mut tape, &g, vars).unwrap();
        assert_eq!(tape.value(out), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_graph_hand_evaluation() {
        // d=1, n=1, proxy 3, entity 2, context 1, every weight 1:
        // self-loop 3*3+3, entity 3*2+3, context 3*1+3 => 27, GELU(27) ~ 27
        let mut tape = Tape::new();
        let proxies = mat_var(&mut tape, 1, 1, &[3.0]);
        let m = vec_var(&mut tape, &[2.0]);
        let c = vec_var(&mut tape, &[1.0]);
        let g = build_graph(&mut tape, proxies, &[m], &[c]).unwrap();
        let vars = scalar_film_vars(&mut tape, 1.0, true);
        let out = film_layer(&mut tape, &g, vars).unwrap();
        assert!((tape.value(out)[0] - 27.0).abs() < 1e-9, "{}", tape.value(out)[0]);
    }

    #[test]
    fn shared_message_ablation_drops_modulation() {
        // gamma = 1, beta = 0: scalar graph above becomes 3 + 2 + 1 = 6
        let mut tape = Tape::new();
        let proxies = mat_var(&mut tape, 1, 1, &[3.0]);
        let m = vec_var(&mut tape, &[2.0]);
        let c = vec_var(&mut tape, &[1.0]);
        let g = build_graph(&mut tape, proxies, &[m], &[c]).unwrap();
        let vars = scalar_film_vars(&mut tape, 1.0, false);
        let out = film_layer(&mut tape, &g, vars).unwrap();
        assert!((tape.value(out)[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn entity_order_and_edge_order_do_not_matter() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let run = |perm: &[usize], shuffle_edges: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let proxies = mat_var(&mut tape, 2, 2, &[0.3, -0.2, 0.8, 0.1]);
            let base = [
                vec![1.0, 0.5],
                vec![-0.7, 0.2],
                vec![0.4, 0.9],
            ];
            let mentions: Vec<Var> = perm.iter().map(|&i| vec_var(&mut tape, &base[i])).collect();
            let c = vec_var(&mut tape, &[0.6, -0.3]);
            let mut g = build_graph(&mut tape, proxies, &mentions, &[c]).unwrap();
            if shuffle_edges {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
                for e in g.edges.iter_mut() {
                    e.shuffle(&mut rng);
                }
            }
            let mk = |tape: &mut Tape, s: f64| {
                tape.input(vec![s, 0.1, -0.2, s], vec![2, 2]).unwrap()
            };
            let edges = [
                FilmEdgeVars {
                    w: mk(&mut tape, 0.5),
                    gamma: Some(mk(&mut tape, 0.3)),
                    beta: Some(mk(&mut tape, -0.4)),
                },
                FilmEdgeVars {
                    w: mk(&mut tape, 0.7),
                    gamma: Some(mk(&mut tape, 0.2)),
                    beta: Some(mk(&mut tape, 0.1)),
                },
                FilmEdgeVars {
                    w: mk(&mut tape, -0.6),
                    gamma: Some(mk(&mut tape, 0.9)),
                    beta: Some(mk(&mut tape, 0.05)),
                },
            ];
            let out = film_layer(&mut tape, &g, FilmVars { edges }).unwrap();
            tape.value(out).to_vec()
        };
        let a = run(&[0, 1, 2], false);
        let b = run(&[2, 0, 1], false);
        let c = run(&[0, 1, 2], true);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn entities_and_contexts_pass_through_unchanged() {
        let mut tape = Tape::new();
        let proxies = mat_var(&mut tape, 2, 1, &[0.4, -0.6]);
        let m = vec_var(&mut tape, &[2.0]);
        let c = vec_var(&mut tape, &[1.0]);
        let g = build_graph(&mut tape, proxies, &[m], &[c]).unwrap();
        let entity_before = tape.value(g.entities.unwrap()).to_vec();
        let ctx_before = tape.value(g.contexts).to_vec();
        let vars = scalar_film_vars(&mut tape, 0.8, true);
        let _ = film_layer(&mut tape, &g, vars).unwrap();
        assert_eq!(tape.value(g.entities.unwrap()), entity_before.as_slice());
        assert_eq!(tape.value(g.contexts), ctx_before.as_slice());
    }

    #[test]
    fn identical_proxy_vectors_get_identical_outputs() {
        let mut tape = Tape::new();
        let proxies = mat_var(&mut tape, 3, 2, &[0.5, -0.1, 0.5, -0.1, 0.2, 0.9]);
        let m = vec_var(&mut tape, &[1.0, 0.3]);
        let c = vec_var(&mut tape, &[0.2, 0.8]);
        let g = build_graph(&mut tape, proxies, &[m], &[c]).unwrap();
        let mk = |tape: &mut Tape| tape.input(vec![0.4, -0.3, 0.7, 0.2], vec![2, 2]).unwrap();
        let edges = [0; 3].map(|_| FilmEdgeVars {
            w: mk(&mut tape),
            gamma: Some(mk(&mut tape)),
            beta: Some(mk(&mut tape)),
        });
        let out = film_layer(&mut tape, &g, FilmVars { edges }).unwrap();
        let v = tape.value(out);
        // proxies 0 and 1 share a vector, proxy 2 differs
        assert_eq!(v[0..2], v[2..4]);
        assert_ne!(v[0..2], v[4..6]);
    }

    #[test]
    fn gradients_reach_all_film_parameters() {
        // 1-entity scalar graph; finite differences over every parameter.
        use crate::diffcore::gradcheck;
        let forward = |theta: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let proxies = tape.param(vec![theta[0]], vec![1, 1]).unwrap();
            let m = tape.param(vec![theta[1]], vec![1]).unwrap();
            let c = tape.param(vec![theta[2]], vec![1]).unwrap();
            let g = build_graph(&mut tape, proxies, &[m], &[c]).unwrap();
            let mut edges = Vec::new();
            for k in 0..3 {
                edges.push(FilmEdgeVars {
                    w: tape.param(vec![theta[3 + 3 * k]], vec![1, 1]).unwrap(),
                    gamma: Some(tape.param(vec![theta[4 + 3 * k]], vec![1, 1]).unwrap()),
                    beta: Some(tape.param(vec![theta[5 + 3 * k]], vec![1, 1]).unwrap()),
                });
            }
            let out = film_layer(
                &mut tape,
                &g,
                FilmVars {
                    edges: [edges[0], edges[1], edges[2]],
                },
            )
            .unwrap();
            tape.scalar_value(out)
        };
        let theta = vec![0.3, -0.7, 0.5, 0.4, -0.2, 0.6, 0.8, 0.1, -0.5, 0.2, 0.9, -0.3];
        let fd = gradcheck::central_diff(forward, &theta, gradcheck::FD_EPS);

        // analytic gradients via the tape
        let mut tape = Tape::new();
        let proxies = tape.param(vec![theta[0]], vec![1, 1]).unwrap();
        let m = tape.param(vec![theta[1]], vec![1]).unwrap();
        let c = tape.param(vec![theta[2]], vec![1]).unwrap();
        let g = build_graph(&mut tape, proxies, &[m], &[c]).unwrap();
        let mut vars = Vec::new();
        let mut edges = Vec::new();
        for k in 0..3 {
            let w = tape.param(vec![theta[3 + 3 * k]], vec![1, 1]).unwrap();
            let gm = tape.param(vec![theta[4 + 3 * k]], vec![1, 1]).unwrap();
            let bt = tape.param(vec![theta[5 + 3 * k]], vec![1, 1]).unwrap();
            vars.extend([w, gm, bt]);
            edges.push(FilmEdgeVars {
                w,
                gamma: Some(gm),
                beta: Some(bt),
            });
        }
        let out = film_layer(
            &mut tape,
            &g,
            FilmVars {
                edges: [edges[0], edges[1], edges[2]],
            },
        )
        .unwrap();
        tape.backward(out).unwrap();
        let mut analytic = vec![
            tape.grad(proxies).unwrap()[0],
            tape.grad(m).unwrap()[0],
            tape.grad(c).unwrap()[0],
        ];
        for v in vars {
            analytic.push(tape.grad(v).unwrap()[0]);
        }
        for (i, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
            let scale = a.abs().max(f.abs()).max(1e-6);
            assert!(
                ((a - f).abs() / scale) < 1e-6,
                "parameter {}: analytic {} vs fd {}",
                i,
                a,
                f
            );
        }
        // every parameter participates
        assert!(analytic.iter().all(|&g| g.abs() > 1e-12), "{:?}", analytic);
    }
}
