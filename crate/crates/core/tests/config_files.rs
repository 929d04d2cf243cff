use parflow_core::config::{load_config, parse_config, parse_table, ConfigError};
use parflow_core::provider::{ChannelKind, LauncherKind, ProviderKind};
use parflow_core::{validate_config, ExecutorKind};

const FRONTERA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/frontera_htex.toml");

#[test]
fn batch_cluster_profile_loads_field_for_field() {
    let doc = load_config(FRONTERA).unwrap();
    assert_eq!(doc.executors.len(), 1);
    let e = &doc.executors[0];
    assert_eq!(e.label, "frontera_htex");
    assert_eq!(e.kind, ExecutorKind::WorkerPool);
    assert_eq!(e.max_workers, 56);
    let p = e.provider.as_ref().unwrap();
    assert_eq!(p.kind, ProviderKind::SimBatch);
    assert_eq!(p.nodes_per_block, 128);
    assert_eq!(p.init_blocks, 1);
    assert_eq!(p.partition, "normal");
    assert_eq!(p.launcher, LauncherKind::PerNode);
    assert_eq!(p.channel, ChannelKind::Local);
    let text = std::fs::read_to_string(FRONTERA).unwrap();
    assert!(validate_config(&parse_table(&text).unwrap()).is_empty());
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(
        load_config("/nonexistent/parflow.toml"),
        Err(ConfigError::Io { .. })
    ));
}

#[test]
fn validation_and_loading_agree() {
    let cases = [
        "[[executors]]\nlabel = \"a\"\nkind = \"in_process\"\n",
        "[[executors]]\nlabel = \"a\"\nkind = \"in_process\"\nmax_workers = 0\n",
        "[[executors]]\nlabel = \"a\"\nkind = \"worker_pool\"\n",
        "[[executors]]\nlabel = \"a\"\nkind = \"worker_pool\"\n[executors.provider]\npartition = \"gpu\"\n",
        "retries = 2\n[strategy]\npoll_interval_s = 0\n[[executors]]\nlabel = \"a\"\nkind = \"in_process\"\n",
    ];
    for text in cases {
        let findings = validate_config(&parse_table(text).unwrap());
        let loaded = parse_config(text);
        assert_eq!(findings.is_empty(), loaded.is_ok(), "{text}");
        if let Ok(doc) = loaded {
            assert!(doc.validate().is_empty());
        }
    }
}
