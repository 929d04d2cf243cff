//! Inputs shared by the kernel benchmarks in `benches/`.

use std::collections::BTreeMap;

use parflow_core::{ArgValue, TaskId};

/// A nested argument list with `futures` future references spread through
/// `width` lists, each padded with plain values.
pub fn argument_tree(width: usize, futures: usize) -> Vec<ArgValue> {
    (0..width)
        .map(|i| {
            let mut items: Vec<ArgValue> = (0..8).map(|j| ArgValue::Int((i * 8 + j) as i64)).collect();
            items.extend(
                (i..futures)
                    .step_by(width.max(1))
                    .map(|f| ArgValue::Future(TaskId(f as u64))),
            );
            let mut m = BTreeMap::new();
            m.insert("values".to_string(), ArgValue::List(items));
            m.insert("name".to_string(), ArgValue::Text(format!("arg{i}")));
            ArgValue::Map(m)
        })
        .collect()
}
