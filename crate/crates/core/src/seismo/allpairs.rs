//! The ambient-noise all-pairs graph: per channel a window and preparation
//! stage, then one correlator and one stacker for every unordered pair.

use std::collections::BTreeMap;

use super::{SeismoError, Trace};
use crate::graph::{GraphBuilder, Node, WorkflowGraph};
use crate::pe::builtin_descriptor;
use crate::value::{DataUnit, Value};

pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(2)
}

pub fn correlator_id(i: usize, j: usize, n: usize) -> String {
    let w = width(n);
    format!("xc_{i:0w$}_{j:0w$}")
}

/// Node ids and feed names of an all-pairs graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AllPairsLayout {
    pub channels: Vec<String>,
    pub feeds: Vec<String>,
    /// (i, j, correlator id, stacker id) with i < j
    pub pairs: Vec<(usize, usize, String, String)>,
}

impl AllPairsLayout {
    pub fn new(channels: Vec<String>) -> Self {
        let n = channels.len();
        let w = width(n);
        let feeds = (0..n).map(|i| format!("ch_{i:0w$}")).collect();
        let mut pairs = Vec::with_capacity(pair_count(n));
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j, correlator_id(i, j, n), format!("stack_{i:0w$}_{j:0w$}")));
            }
        }
        AllPairsLayout { channels, feeds, pairs }
    }

    pub fn stacker_ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.3.as_str())
    }
}

/// Build the graph for `channels`; `prep` is the per-channel preparation node.
pub fn build_all_pairs_graph(
    channels: &[String],
    prep: &Node,
    max_lag: usize,
    window_seconds: f64,
) -> Result<(WorkflowGraph, AllPairsLayout), SeismoError> {
    if channels.len() < 2 {
        return Err(SeismoError::TooFewChannels(channels.len()));
    }
    if !(window_seconds > 0.0) {
        return Err(SeismoError::BadParams("window_seconds must be positive".into()));
    }
    let layout = AllPairsLayout::new(channels.to_vec());
    let n = channels.len();
    let w = width(n);
    let window = builtin_descriptor("trace_window").expect("trace_window is built in");
    let xcorr = builtin_descriptor("xcorr").expect("xcorr is built in");
    let stack = builtin_descriptor("stack").expect("stack is built in");

    let mut b = GraphBuilder::new();
    for (i, feed) in layout.feeds.iter().enumerate() {
        let win = format!("win_{i:0w$}");
        let prep_id = format!("prep_{i:0w$}");
        b.node(&win, window.clone(), [("window_seconds".to_string(), Value::Float(window_seconds))].into())
            .add(&prep_id, prep.clone())
            .feed(feed, &format!("{win}.i"))
            .connect(&format!("{win}.o"), &format!("{prep_id}.i"));
    }
    let lag = [("max_lag".to_string(), Value::Int(max_lag as i64))];
    for (i, j, xc, st) in &layout.pairs {
        b.node(xc, xcorr.clone(), lag.clone().into())
            .node(st, stack.clone(), Default::default())
            .connect(&format!("prep_{i:0w$}.o"), &format!("{xc}.a"))
            .connect(&format!("prep_{j:0w$}.o"), &format!("{xc}.b"))
            .connect(&format!("{xc}.o"), &format!("{st}.i"));
    }
    let graph = b.build().map_err(|e| SeismoError::BadParams(e.to_string()))?;
    Ok((graph, layout))
}

/// One unit per trace, keyed by the feed of its channel.
pub fn all_pairs_feeds(layout: &AllPairsLayout, traces: &[Trace]) -> Result<BTreeMap<String, Vec<DataUnit>>, SeismoError> {
    if traces.len() != layout.channels.len() {
        return Err(SeismoError::BadParams(format!(
            "{} traces for {} channels",
            traces.len(),
            layout.channels.len()
        )));
    }
    Ok(layout.feeds.iter().cloned().zip(traces.iter().map(|t| vec![t.to_unit()])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("XX.S{i:03}.HHZ")).collect()
    }

    fn prep() -> Node {
        Node::new(builtin_descriptor("trace_transform").unwrap(), [("kind".to_string(), Value::from("demean"))].into())
    }

    #[test]
    fn counts_follow_pair_law() {
        for n in [2usize, 4, 6, 8] {
            let (g, l) = build_all_pairs_graph(&ids(n), &prep(), 4, 1.0).unwrap();
            assert_eq!(l.pairs.len(), n * (n - 1) / 2);
            assert_eq!(g.len(), 2 * n + 2 * pair_count(n));
            assert_eq!(g.open_outputs().len(), pair_count(n));
        }
        assert_eq!(correlator_id(3, 7, 8), "xc_03_07");
        assert_eq!(correlator_id(3, 7, 1000), "xc_003_007");
    }

    #[test]
    fn rejects_single_channel() {
        assert!(matches!(build_all_pairs_graph(&ids(1), &prep(), 4, 1.0), Err(SeismoError::TooFewChannels(1))));
    }
}
