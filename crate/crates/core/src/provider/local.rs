use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{
    terminate, Block, BlockId, BlockState, BlockTable, Channel, Clock, LaunchSpec, Launcher, Provider, ProviderError,
    ProviderSpec, RealClock, CANCEL_GRACE,
};

/// Starts blocks immediately on the local machine.
pub struct LocalProvider {
    spec: ProviderSpec,
    channel: Arc<dyn Channel>,
    launcher: Launcher,
    clock: Arc<dyn Clock>,
    table: Mutex<BlockTable>,
    max_blocks: AtomicUsize,
}

impl LocalProvider {
    pub fn new(spec: ProviderSpec, channel: Arc<dyn Channel>) -> Self {
        Self::with_clock(spec, channel, Arc::new(RealClock::new()))
    }

    pub fn with_clock(spec: ProviderSpec, channel: Arc<dyn Channel>, clock: Arc<dyn Clock>) -> Self {
        Self {
            launcher: Launcher::new(spec.launcher),
            max_blocks: AtomicUsize::new(spec.max_blocks),
            spec,
            channel,
            clock,
            table: Mutex::new(BlockTable::new()),
        }
    }
}

impl Provider for LocalProvider {
    fn spec(&self) -> &ProviderSpec {
        &self.spec
    }

    fn submit_blocks(&self, n: usize, launch: &LaunchSpec) -> Result<Vec<BlockId>, ProviderError> {
        let now = self.clock.now();
        let mut table = self.table.lock().unwrap();
        table.refresh(now);
        let active = table.active_count();
        let max = self.max_blocks.load(Ordering::SeqCst);
        if active + n > max {
            return Err(ProviderError::Capacity {
                requested: n,
                active,
                max,
            });
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let id = table.request(|id| format!("local-{id}"), now);
            table.set_state(id, BlockState::Pending, now)?;
            let commands = self.launcher.commands(id, self.spec.nodes_per_block, launch);
            table.launch(id, &commands, self.channel.as_ref(), now)?;
            ids.push(id);
        }
        Ok(ids)
    }

    fn status(&self, ids: &[BlockId]) -> Result<Vec<BlockState>, ProviderError> {
        let mut table = self.table.lock().unwrap();
        table.refresh(self.clock.now());
        ids.iter().map(|id| table.state(*id)).collect()
    }

    fn cancel(&self, ids: &[BlockId]) -> Result<(), ProviderError> {
        let mut procs = Vec::new();
        {
            let mut table = self.table.lock().unwrap();
            let now = self.clock.now();
            table.refresh(now);
            for id in ids {
                if !table.contains(*id) {
                    return Err(ProviderError::UnknownBlock(*id));
                }
            }
            for id in ids {
                if table.state(*id)?.is_active() {
                    procs.extend(table.take_procs(*id));
                    table.set_state(*id, BlockState::Cancelled, now)?;
                }
            }
        }
        terminate(procs, CANCEL_GRACE);
        Ok(())
    }

    fn blocks(&self) -> Vec<Block> {
        let mut table = self.table.lock().unwrap();
        table.refresh(self.clock.now());
        table.snapshot()
    }

    fn max_blocks(&self) -> usize {
        self.max_blocks.load(Ordering::SeqCst)
    }

    fn set_max_blocks(&self, max: usize) {
        self.max_blocks.store(max, Ordering::SeqCst);
    }

    fn kill_node(&self, block: BlockId, index: u32) -> Result<(), ProviderError> {
        self.table.lock().unwrap().kill_node(block, index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{LauncherKind, LocalChannel};

    fn sleeper(secs: u32) -> LaunchSpec {
        // `sh -c 'sleep N' sh --addr ...` ignores the appended worker flags.
        LaunchSpec {
            command: vec!["sh".into(), "-c".into(), format!("sleep {secs}"), "sh".into()],
            addr: "127.0.0.1:1".into(),
            slots: 1,
            heartbeat_ms: 5000,
            env: vec![],
            log_dir: None,
        }
    }

    #[test]
    fn capacity_is_checked_before_any_request() {
        let p = LocalProvider::new(ProviderSpec::local(1).blocks(0, 0, 2), Arc::new(LocalChannel));
        assert!(matches!(
            p.submit_blocks(3, &sleeper(30)),
            Err(ProviderError::Capacity {
                requested: 3,
                active: 0,
                max: 2
            })
        ));
        assert!(p.blocks().is_empty());
        let ids = p.submit_blocks(2, &sleeper(30)).unwrap();
        assert_eq!(p.status(&ids).unwrap(), vec![BlockState::Running; 2]);
        assert!(p.submit(&sleeper(30)).is_err());
        p.cancel(&ids).unwrap();
        assert_eq!(p.status(&ids).unwrap(), vec![BlockState::Cancelled; 2]);
        assert_eq!(p.active_blocks(), 0);
        let history: Vec<BlockState> = p.blocks()[0].history.iter().map(|(s, _)| *s).collect();
        assert_eq!(
            history,
            [
                BlockState::Requested,
                BlockState::Pending,
                BlockState::Running,
                BlockState::Cancelled
            ]
        );
    }

    #[test]
    fn block_finishes_when_hosts_exit() {
        let mut spec = ProviderSpec::local(3).blocks(0, 0, 1);
        spec.launcher = LauncherKind::PerNode;
        let p = LocalProvider::new(spec, Arc::new(LocalChannel));
        let id = p.submit(&sleeper(0)).unwrap();
        assert_eq!(p.blocks()[0].nodes.len(), 3);
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
        while p.status(&[id]).unwrap()[0] == BlockState::Running {
            assert!(std::time::Instant::now() < deadline);
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        assert_eq!(p.status(&[id]).unwrap()[0], BlockState::Done);
    }

    #[test]
    fn kill_node_fails_the_block() {
        let p = LocalProvider::new(ProviderSpec::local(1).blocks(0, 0, 1), Arc::new(LocalChannel));
        let id = p.submit(&sleeper(30)).unwrap();
        p.kill_node(id, 0).unwrap();
        assert_eq!(p.status(&[id]).unwrap()[0], BlockState::Failed);
        assert!(matches!(p.kill_node(id, 5), Err(ProviderError::UnknownNode(_, 5))));
    }
}
