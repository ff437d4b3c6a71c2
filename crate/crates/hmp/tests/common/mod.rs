//! Shared helpers for the integration suites: serialized execution, thread
//! and process workers, and an in-process distributed runner.
#![allow(dead_code)] // each test binary uses its own subset

use std::io::BufRead;
use std::panic::AssertUnwindSafe;
use std::process::{Child, Command, Stdio};
use std::sync::{Mutex, MutexGuard};
use std::thread::JoinHandle;

use hmp::collectives::RingGroup;
use hmp::engine::{ExecMode, RankLayerTrace, WorkerEngine};
use hmp::memory::MemoryAccountant;
use hmp::model::Model;
use hmp::planner::PartitionPlan;
use hmp::runtime::{worker_main, ClusterConfig, WorkerSpec};
use hmp::tensor::{split_rows, Scalar, Tensor};
use hmp::throttle::Throttle;

/// Heavy suites share cores; run them one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Runs one acceptance criterion and prints a single PASS/FAIL line.
pub fn criterion(id: &str, f: impl FnOnce() -> Result<(), String>) {
    match std::panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => println!("ACCEPTANCE {id}: PASS"),
        Ok(Err(msg)) => {
            println!("ACCEPTANCE {id}: FAIL ({msg})");
            panic!("acceptance criterion {id} failed: {msg}");
        }
        Err(panic) => {
            println!("ACCEPTANCE {id}: FAIL (panic)");
            std::panic::resume_unwind(panic);
        }
    }
}

/// Distributed execution over an in-process loopback ring, one engine thread
/// per rank. Returns the full output (identical on every rank) and the
/// per-rank traces.
pub fn run_engine_distributed<T: Scalar>(
    model: &Model<T>,
    plan: &PartitionPlan,
    input: &Tensor<T>,
    mode: ExecMode,
    overlap: bool,
) -> (Tensor<T>, Vec<Vec<RankLayerTrace>>) {
    let world = plan.world();
    let groups = RingGroup::loopback_ring(world, None).expect("loopback ring");
    let segments = split_rows(input, &plan.seq_rows).expect("input split");
    let mut outputs: Vec<Option<(Tensor<T>, Vec<RankLayerTrace>)>> = vec![None; world];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for mut group in groups {
            let rank = group.rank();
            let local = match mode {
                ExecMode::TpAllreduce => input.clone(),
                _ => segments[rank].clone(),
            };
            handles.push(scope.spawn(move || {
                let accountant = MemoryAccountant::new(None);
                let engine = WorkerEngine::new(model, plan, rank, mode, overlap, &accountant)
                    .unwrap_or_else(|e| panic!("rank {rank} engine: {e}"));
                let (out, traces) = engine
                    .run(&mut group, &Throttle::none(), &accountant, &local)
                    .unwrap_or_else(|e| panic!("rank {rank} run: {e}"));
                (rank, out, traces)
            }));
        }
        for h in handles {
            let (rank, out, traces) = h.join().expect("rank thread");
            outputs[rank] = Some((out, traces));
        }
    });
    let mut traces = Vec::with_capacity(world);
    let mut first: Option<Tensor<T>> = None;
    for slot in outputs {
        let (out, t) = slot.expect("every rank reported");
        if first.is_none() {
            first = Some(out);
        }
        traces.push(t);
    }
    (first.expect("world >= 1"), traces)
}

/// Workers running as threads of the test process, reachable over loopback.
pub struct ThreadWorkers {
    pub config: ClusterConfig,
    handles: Vec<JoinHandle<hmp::Result<()>>>,
}

impl ThreadWorkers {
    pub fn spawn(world: usize, timeout_ms: u64, tune: impl Fn(&mut WorkerSpec)) -> Self {
        let mut handles = Vec::new();
        let mut workers = Vec::new();
        for device_id in 0..world {
            let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("reserve port");
            let addr = listener.local_addr().expect("local addr").to_string();
            drop(listener);
            let worker_addr = addr.clone();
            handles.push(std::thread::spawn(move || worker_main(&worker_addr)));
            let mut spec = WorkerSpec {
                device_id,
                address: addr,
                compute_throttle: 1.0,
                bandwidth_bps: None,
                memory_budget: None,
            };
            tune(&mut spec);
            workers.push(spec);
        }
        Self { config: ClusterConfig { schema_version: 1, timeout_ms, workers }, handles }
    }

    /// Joins worker threads after a coordinator shutdown.
    pub fn join(self) {
        for h in self.handles {
            h.join().expect("worker thread").expect("worker exit");
        }
    }
}

/// A worker subprocess of the real binary, killable mid-run.
pub struct ProcWorker {
    pub child: Child,
    pub address: String,
}

impl ProcWorker {
    pub fn spawn() -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_hmp"))
            .args(["worker", "--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn worker process");
        let stdout = child.stdout.take().expect("worker stdout");
        let mut lines = std::io::BufReader::new(stdout).lines();
        let banner = lines
            .next()
            .expect("worker printed its address")
            .expect("read worker banner");
        let address = banner
            .rsplit(' ')
            .next()
            .expect("banner ends with the address")
            .to_string();
        Self { child, address }
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ProcWorker {
    fn drop(&mut self) {
        self.kill();
    }
}
