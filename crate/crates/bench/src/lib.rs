//! Workload builders shared by the benchmarks.

use histune_core::bus::TracePayload;

/// `episodes × steps` traces with a reward that drifts slowly per episode.
pub fn synthetic_traces(episodes: u64, steps: u64) -> Vec<TracePayload> {
    let mut out = Vec::with_capacity((episodes * steps) as usize);
    for e in 0..episodes {
        for s in 0..steps {
            out.push(TracePayload {
                agent: "bench".into(),
                episode: e,
                step: s,
                reward: (e % 7) as f64 + (s % 3) as f64 * 0.5,
                action: "stay".into(),
                state: "0,0|1,1".into(),
                qvalues: vec![0.0; 5],
                gamma: 0.9,
            });
        }
    }
    out
}
