//! Ring-topology group communication: AllGather, ReduceScatter and AllReduce
//! over neighbor-to-neighbor links, plus tile-based variants that overlap the
//! ring steps with GEMM compute.
//!
//! Every collective is blocking from the caller's view; inside a step the
//! outbound transfer is posted before compute starts and both are awaited
//! before the next step, so transfers progress while tiles multiply. With
//! unequal segment sizes the tiles are uneven and the overlap window shrinks
//! toward the largest tile, so balanced sequence splits overlap best.

use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{self, Scalar, Tensor};
use crate::throttle::Throttle;
use crate::transport::{Frame, FrameKind, Link};

/// Payload bytes this rank sent per primitive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrafficCounters {
    pub all_gather: u64,
    pub reduce_scatter: u64,
    pub all_reduce: u64,
}

impl TrafficCounters {
    pub fn total(&self) -> u64 {
        self.all_gather + self.reduce_scatter + self.all_reduce
    }

    pub fn minus(&self, earlier: &TrafficCounters) -> TrafficCounters {
        TrafficCounters {
            all_gather: self.all_gather - earlier.all_gather,
            reduce_scatter: self.reduce_scatter - earlier.reduce_scatter,
            all_reduce: self.all_reduce - earlier.all_reduce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Primitive {
    AllGather,
    ReduceScatter,
    AllReduce,
}

impl Primitive {
    fn name(self) -> &'static str {
        match self {
            Self::AllGather => "all_gather",
            Self::ReduceScatter => "reduce_scatter",
            Self::AllReduce => "all_reduce",
        }
    }
}

struct StepDelay {
    min_ms: u64,
    max_ms: u64,
    rng: SplitMix64,
}

/// One rank's membership in a ring of `world` devices. Owns the links to its
/// successor and predecessor; one collective may run at a time.
pub struct RingGroup {
    rank: usize,
    world: usize,
    next: Option<Link>,
    prev: Option<Link>,
    counters: TrafficCounters,
    collective_id: u64,
    timeout: Duration,
    step_delay: Option<StepDelay>,
}

impl RingGroup {
    /// Degenerate single-device ring: every collective is local.
    pub fn single() -> Self {
        Self {
            rank: 0,
            world: 1,
            next: None,
            prev: None,
            counters: TrafficCounters::default(),
            collective_id: 0,
            timeout: Duration::from_secs(10),
            step_delay: None,
        }
    }

    pub fn new(
        rank: usize,
        world: usize,
        next: Option<Link>,
        prev: Option<Link>,
        timeout: Duration,
    ) -> Result<Self> {
        if world == 0 || rank >= world {
            return Err(Error::Config(format!("rank {rank} outside world of {world}")));
        }
        if world > 1 && (next.is_none() || prev.is_none()) {
            return Err(Error::Config("multi-device ring requires both neighbor links".into()));
        }
        Ok(Self {
            rank,
            world,
            next,
            prev,
            counters: TrafficCounters::default(),
            collective_id: 0,
            timeout,
            step_delay: None,
        })
    }

    /// In-process ring over loopback TCP, one group per rank. Used by tests
    /// and local benchmarks; workers build the same structure from their
    /// cluster connections.
    pub fn loopback_ring(world: usize, rate_bps: Option<u64>) -> Result<Vec<RingGroup>> {
        let timeout = Duration::from_secs(10);
        if world == 1 {
            return Ok(vec![Self::single()]);
        }
        let listeners: Vec<TcpListener> = (0..world)
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io("binding loopback ring", e))?;
        let addrs: Vec<_> = listeners
            .iter()
            .map(|l| l.local_addr())
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io("resolving loopback addresses", e))?;

        let mut groups = Vec::with_capacity(world);
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for (rank, listener) in listeners.iter().enumerate() {
                let succ_addr = addrs[(rank + 1) % world];
                handles.push(scope.spawn(move || -> Result<(TcpStream, TcpStream)> {
                    let next = TcpStream::connect(succ_addr)
                        .map_err(|e| Error::io("connecting to ring successor", e))?;
                    let (prev, _) = listener
                        .accept()
                        .map_err(|e| Error::io("accepting ring predecessor", e))?;
                    Ok((next, prev))
                }));
            }
            for (rank, handle) in handles.into_iter().enumerate() {
                let (next_stream, prev_stream) = handle.join().expect("ring setup thread")?;
                let next = Link::new(next_stream, (rank + 1) % world, rate_bps)
                    .map_err(|e| Error::io("creating successor link", e))?;
                let prev = Link::new(prev_stream, (rank + world - 1) % world, rate_bps)
                    .map_err(|e| Error::io("creating predecessor link", e))?;
                groups.push(RingGroup::new(rank, world, Some(next), Some(prev), timeout)?);
            }
            Ok(())
        })?;
        Ok(groups)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn counters(&self) -> TrafficCounters {
        self.counters
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn set_bandwidth(&self, rate_bps: Option<u64>) {
        if let Some(l) = &self.next {
            l.set_bandwidth(rate_bps);
        }
    }

    /// Fragment payload bytes the transport actually wrote for this rank.
    pub fn transport_fragment_bytes(&self) -> u64 {
        self.next.as_ref().map_or(0, |l| l.fragment_bytes_sent())
    }

    /// Sleeps a random duration before every ring step; collective results
    /// must not depend on step timing.
    pub fn inject_step_delay(&mut self, min_ms: u64, max_ms: u64, seed: u64) {
        self.step_delay = Some(StepDelay { min_ms, max_ms, rng: SplitMix64::new(seed) });
    }

    fn maybe_delay(&mut self) {
        if let Some(d) = &mut self.step_delay {
            let span = d.max_ms.saturating_sub(d.min_ms).max(1);
            let ms = d.min_ms + d.rng.next_u64() % span;
            std::thread::sleep(Duration::from_millis(ms));
        }
    }

    fn next_collective_id(&mut self) -> u64 {
        self.collective_id += 1;
        self.collective_id
    }

    fn attribute(primitive: Primitive, err: Error) -> Error {
        match err {
            Error::Collective { rank, detail, .. } => {
                Error::Collective { primitive: primitive.name(), rank, detail }
            }
            other => other,
        }
    }

    fn count(&mut self, primitive: Primitive, bytes: u64) {
        match primitive {
            Primitive::AllGather => self.counters.all_gather += bytes,
            Primitive::ReduceScatter => self.counters.reduce_scatter += bytes,
            Primitive::AllReduce => self.counters.all_reduce += bytes,
        }
    }

    fn recv_fragment(
        &mut self,
        primitive: Primitive,
        cid: u64,
        expect_origin: usize,
        expect_bytes: usize,
    ) -> Result<Vec<u8>> {
        let prev = self.prev.as_ref().expect("ring link");
        let frame = prev.recv(self.timeout).map_err(|e| Self::attribute(primitive, e))?;
        if frame.kind != FrameKind::TensorFragment {
            return Err(Error::Protocol(format!(
                "{} received a {:?} frame mid-collective",
                primitive.name(),
                frame.kind
            )));
        }
        if frame.collective_id != cid {
            return Err(Error::Protocol(format!(
                "{} received collective id {} while running {}",
                primitive.name(),
                frame.collective_id,
                cid
            )));
        }
        if frame.origin_rank as usize != expect_origin {
            return Err(Error::Protocol(format!(
                "{} expected fragment of origin {}, got {}",
                primitive.name(),
                expect_origin,
                frame.origin_rank
            )));
        }
        if frame.payload.len() != expect_bytes {
            return Err(Error::Protocol(format!(
                "{} fragment of origin {} carries {} bytes, sizes say {}",
                primitive.name(),
                expect_origin,
                frame.payload.len(),
                expect_bytes
            )));
        }
        Ok(frame.payload)
    }

    fn validate_sizes<T: Scalar>(
        &self,
        primitive: Primitive,
        sizes: &[usize],
        local: &Tensor<T>,
        local_is_fragment: bool,
    ) -> Result<()> {
        if sizes.len() != self.world {
            return Err(Error::Protocol(format!(
                "{} got {} segment sizes for a world of {}",
                primitive.name(),
                sizes.len(),
                self.world
            )));
        }
        let expect = if local_is_fragment { sizes[self.rank] } else { sizes.iter().sum() };
        if local.rows() != expect {
            return Err(Error::Protocol(format!(
                "{} local tensor has {} rows, sizes imply {}",
                primitive.name(),
                local.rows(),
                expect
            )));
        }
        Ok(())
    }

    // -- plain collectives --------------------------------------------------

    /// Every rank returns the row concatenation of all ranks' fragments in
    /// rank order; D-1 ring steps, each forwarding the newest fragment.
    pub fn all_gather<T: Scalar>(&mut self, local: &Tensor<T>, sizes: &[usize]) -> Result<Tensor<T>> {
        self.all_gather_impl(local, sizes, Primitive::AllGather)
    }

    fn all_gather_impl<T: Scalar>(
        &mut self,
        local: &Tensor<T>,
        sizes: &[usize],
        primitive: Primitive,
    ) -> Result<Tensor<T>> {
        self.validate_sizes(primitive, sizes, local, true)?;
        if self.world == 1 {
            return Ok(local.clone());
        }
        let cid = self.next_collective_id();
        let cols = local.cols();
        let world = self.world;
        let rank = self.rank;

        let mut payloads: Vec<Option<Vec<u8>>> = vec![None; world];
        payloads[rank] = Some(local.to_le_bytes());
        for step in 0..world - 1 {
            self.maybe_delay();
            let send_origin = (rank + world - step) % world;
            let payload = payloads[send_origin].clone().expect("fragment to forward");
            self.count(primitive, payload.len() as u64);
            let ticket = self
                .next
                .as_ref()
                .expect("ring link")
                .post(Frame::fragment(cid, send_origin as u16, step as u16, payload));
            let recv_origin = (rank + 2 * world - step - 1) % world;
            let incoming = self.recv_fragment(
                primitive,
                cid,
                recv_origin,
                sizes[recv_origin] * cols * T::BYTES,
            )?;
            payloads[recv_origin] = Some(incoming);
            ticket.wait(self.timeout).map_err(|e| Self::attribute(primitive, e))?;
        }

        let mut parts = Vec::with_capacity(world);
        for (origin, payload) in payloads.iter().enumerate() {
            let bytes = payload.as_ref().expect("all fragments present");
            parts.push(Tensor::<T>::from_le_bytes(sizes[origin], cols, bytes).map_err(Error::Shape)?);
        }
        Ok(tensor::concat_rows(&parts)?)
    }

    /// Rank r returns the element-wise sum over all ranks of segment r
    /// (segment boundaries from `sizes`); D-1 reduce-and-forward steps.
    pub fn reduce_scatter<T: Scalar>(
        &mut self,
        local: &Tensor<T>,
        sizes: &[usize],
    ) -> Result<Tensor<T>> {
        self.reduce_scatter_impl(local, sizes, Primitive::ReduceScatter)
    }

    fn reduce_scatter_impl<T: Scalar>(
        &mut self,
        local: &Tensor<T>,
        sizes: &[usize],
        primitive: Primitive,
    ) -> Result<Tensor<T>> {
        self.validate_sizes(primitive, sizes, local, false)?;
        if self.world == 1 {
            return Ok(local.clone());
        }
        let cid = self.next_collective_id();
        let cols = local.cols();
        let world = self.world;
        let rank = self.rank;

        let mut acc = tensor::split_rows(local, sizes)?;
        for step in 0..world - 1 {
            self.maybe_delay();
            let send_idx = (rank + world - 1 - step) % world;
            let payload = acc[send_idx].to_le_bytes();
            self.count(primitive, payload.len() as u64);
            let ticket = self
                .next
                .as_ref()
                .expect("ring link")
                .post(Frame::fragment(cid, send_idx as u16, step as u16, payload));
            let recv_idx = (rank + 2 * world - 2 - step) % world;
            let incoming = self.recv_fragment(
                primitive,
                cid,
                recv_idx,
                sizes[recv_idx] * cols * T::BYTES,
            )?;
            let partial = Tensor::<T>::from_le_bytes(sizes[recv_idx], cols, &incoming)
                .map_err(Error::Shape)?;
            // Incoming partial on the left, local contribution on the right:
            // the same chain order the overlapped variant produces.
            acc[recv_idx] = tensor::residual_add(&partial, &acc[recv_idx])?;
            ticket.wait(self.timeout).map_err(|e| Self::attribute(primitive, e))?;
        }
        Ok(acc[rank].clone())
    }

    /// Element-wise sum of all ranks' tensors on every rank, implemented as
    /// ReduceScatter over near-equal row segments followed by AllGather.
    pub fn all_reduce<T: Scalar>(&mut self, local: &Tensor<T>) -> Result<Tensor<T>> {
        if self.world == 1 {
            return Ok(local.clone());
        }
        let sizes = crate::planner::equal_split(local.rows(), self.world);
        let scattered = self.reduce_scatter_impl(local, &sizes, Primitive::AllReduce)?;
        self.all_gather_impl(&scattered, &sizes, Primitive::AllReduce)
    }

    // -- overlapped variants ------------------------------------------------

    /// `gemm(all_gather(local_rows), weight)` computed as D tile GEMMs: step
    /// k multiplies the fragment originating at rank (rank - k) while
    /// forwarding it to the successor; the final step is compute-only.
    /// Result rows are ordered by originating rank, equal to the
    /// non-overlapped composition.
    pub fn all_gather_gemm_overlapped<T: Scalar>(
        &mut self,
        local_rows: &Tensor<T>,
        weight: &Tensor<T>,
        sizes: &[usize],
        throttle: &Throttle,
    ) -> Result<Tensor<T>> {
        let primitive = Primitive::AllGather;
        self.validate_sizes(primitive, sizes, local_rows, true)?;
        if local_rows.cols() != weight.rows() {
            return Err(Error::Shape(tensor::ShapeError::Gemm {
                a: local_rows.shape(),
                b: weight.shape(),
            }));
        }
        if self.world == 1 {
            let cost = tensor::gemm_flops(local_rows.rows(), local_rows.cols(), weight.cols());
            return Ok(throttle.run_cost(cost, || tensor::gemm(local_rows, weight))?);
        }
        let cid = self.next_collective_id();
        let world = self.world;
        let rank = self.rank;
        let in_cols = local_rows.cols();
        let total_rows: usize = sizes.iter().sum();
        let offsets = row_offsets(sizes);

        let mut out = Tensor::<T>::zeros(total_rows, weight.cols());
        let mut current = local_rows.to_le_bytes();
        for step in 0..world {
            self.maybe_delay();
            let origin = (rank + world - step) % world;
            let ticket = if step < world - 1 {
                self.count(primitive, current.len() as u64);
                Some(self.next.as_ref().expect("ring link").post(Frame::fragment(
                    cid,
                    origin as u16,
                    step as u16,
                    current.clone(),
                )))
            } else {
                None
            };

            let fragment = Tensor::<T>::from_le_bytes(sizes[origin], in_cols, &current)
                .map_err(Error::Shape)?;
            let cost = tensor::gemm_flops(fragment.rows(), in_cols, weight.cols());
            let tile = throttle.run_cost(cost, || tensor::gemm(&fragment, weight))?;
            copy_rows_into(&mut out, &tile, offsets[origin]);

            if step < world - 1 {
                let recv_origin = (rank + 2 * world - step - 1) % world;
                current = self.recv_fragment(
                    primitive,
                    cid,
                    recv_origin,
                    sizes[recv_origin] * in_cols * T::BYTES,
                )?;
                if let Some(t) = ticket {
                    t.wait(self.timeout).map_err(|e| Self::attribute(primitive, e))?;
                }
            }
        }
        Ok(out)
    }

    /// `reduce_scatter(gemm(local_acts, weight), sizes)` computed tile-wise:
    /// rank i multiplies row tiles in the order (i+D-1), (i+D-2), ..., i,
    /// forwarding each partial sum to the successor and reducing incoming
    /// partials into the next tile, so after D steps rank i holds the fully
    /// reduced segment i.
    pub fn gemm_reduce_scatter_overlapped<T: Scalar>(
        &mut self,
        local_acts: &Tensor<T>,
        weight: &Tensor<T>,
        sizes: &[usize],
        throttle: &Throttle,
    ) -> Result<Tensor<T>> {
        let primitive = Primitive::ReduceScatter;
        self.validate_sizes(primitive, sizes, local_acts, false)?;
        if local_acts.cols() != weight.rows() {
            return Err(Error::Shape(tensor::ShapeError::Gemm {
                a: local_acts.shape(),
                b: weight.shape(),
            }));
        }
        if self.world == 1 {
            let cost = tensor::gemm_flops(local_acts.rows(), local_acts.cols(), weight.cols());
            return Ok(throttle.run_cost(cost, || tensor::gemm(local_acts, weight))?);
        }
        let cid = self.next_collective_id();
        let world = self.world;
        let rank = self.rank;
        let out_cols = weight.cols();

        let tiles = tensor::split_rows(local_acts, sizes)?;
        let mut acc: Option<Tensor<T>> = None;
        for step in 0..world {
            self.maybe_delay();
            let tile_idx = (rank + world - 1 - step) % world;
            let ticket = if step > 0 {
                let prev_idx = (rank + world - step) % world;
                let payload = acc.as_ref().expect("running partial").to_le_bytes();
                self.count(primitive, payload.len() as u64);
                Some(self.next.as_ref().expect("ring link").post(Frame::fragment(
                    cid,
                    prev_idx as u16,
                    step as u16,
                    payload,
                )))
            } else {
                None
            };

            let cost = tensor::gemm_flops(tiles[tile_idx].rows(), local_acts.cols(), out_cols);
            let tile_out = throttle.run_cost(cost, || tensor::gemm(&tiles[tile_idx], weight))?;
            if step == 0 {
                acc = Some(tile_out);
            } else {
                let incoming = self.recv_fragment(
                    primitive,
                    cid,
                    tile_idx,
                    sizes[tile_idx] * out_cols * T::BYTES,
                )?;
                let partial = Tensor::<T>::from_le_bytes(sizes[tile_idx], out_cols, &incoming)
                    .map_err(Error::Shape)?;
                acc = Some(tensor::residual_add(&partial, &tile_out)?);
                if let Some(t) = ticket {
                    t.wait(self.timeout).map_err(|e| Self::attribute(primitive, e))?;
                }
            }
        }
        Ok(acc.expect("world >= 2 always reduces"))
    }
}

pub fn row_offsets(sizes: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &s in sizes {
        offsets.push(acc);
        acc += s;
    }
    offsets
}

fn copy_rows_into<T: Scalar>(out: &mut Tensor<T>, block: &Tensor<T>, row_offset: usize) {
    let updated = tensor::concat_rows(&[
        out.row_block(0, row_offset),
        block.clone(),
        out.row_block(row_offset + block.rows(), out.rows() - row_offset - block.rows()),
    ])
    .expect("row blocks partition the output");
    *out = updated;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rel_error;

    /// Runs `f` on every rank of a fresh loopback ring and returns per-rank
    /// results in rank order, panicking on any rank's error.
    fn run_ring<T, F>(world: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut RingGroup) -> Result<T> + Sync,
    {
        let groups = RingGroup::loopback_ring(world, None).unwrap();
        run_on_groups(groups, f)
    }

    fn run_on_groups<T, F>(groups: Vec<RingGroup>, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut RingGroup) -> Result<T> + Sync,
    {
        let mut out: Vec<Option<T>> = groups.iter().map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for mut group in groups {
                let f = &f;
                handles.push(scope.spawn(move || {
                    let rank = group.rank();
                    (rank, f(&mut group).unwrap_or_else(|e| panic!("rank {rank}: {e}")))
                }));
            }
            for h in handles {
                let (rank, val) = h.join().expect("ring worker");
                out[rank] = Some(val);
            }
        });
        out.into_iter().map(|v| v.unwrap()).collect()
    }

    fn random_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.normal(0.0, 1.0) as f32)
    }

    #[test]
    fn all_gather_single_rank_is_identity() {
        let mut group = RingGroup::single();
        let local = random_rows(3, 4, 1);
        let out = group.all_gather(&local, &[3]).unwrap();
        assert_eq!(out, local);
        assert_eq!(group.counters().total(), 0);
    }

    #[test]
    fn all_gather_three_ranks_concatenates_in_rank_order() {
        let sizes = [2usize, 2, 2];
        let outs = run_ring(3, |g| {
            let local = Tensor::<f32>::from_fn(2, 3, |_, _| g.rank() as f32 + 1.0);
            g.all_gather(&local, &sizes)
        });
        for out in &outs {
            assert_eq!(out.shape(), (6, 3));
            for origin in 0..3 {
                for r in 0..2 {
                    assert_eq!(out.at(origin * 2 + r, 0), origin as f32 + 1.0);
                }
            }
        }
    }

    #[test]
    fn all_gather_bytes_match_counting_argument() {
        // Each rank forwards every fragment except its successor's.
        let sizes = [3usize, 1, 2, 4];
        let cols = 5;
        let world = 4;
        let counts = run_ring(world, |g| {
            let local = random_rows(sizes[g.rank()], cols, g.rank() as u64);
            g.all_gather(&local, &sizes)?;
            Ok((g.counters().all_gather, g.transport_fragment_bytes()))
        });
        let total: usize = sizes.iter().sum();
        for (rank, (collective_bytes, transport_bytes)) in counts.iter().enumerate() {
            let succ = (rank + 1) % world;
            let expect = ((total - sizes[succ]) * cols * 4) as u64;
            assert_eq!(*collective_bytes, expect, "rank {rank}");
            assert_eq!(*transport_bytes, expect, "rank {rank} transport");
        }
    }

    #[test]
    fn reduce_scatter_two_ranks_of_ones() {
        let sizes = [2usize, 2];
        let outs = run_ring(2, |g| {
            let local = Tensor::<f32>::from_fn(4, 4, |_, _| 1.0);
            g.reduce_scatter(&local, &sizes)
        });
        for out in &outs {
            assert_eq!(out.shape(), (2, 4));
            assert!(out.data().iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn reduce_scatter_matches_sum_then_split_oracle() {
        let sizes = [2usize, 3, 1];
        let total = 6;
        let cols = 4;
        let inputs: Vec<Tensor<f32>> =
            (0..3).map(|r| random_rows(total, cols, 100 + r as u64)).collect();
        let mut expected = Tensor::<f32>::zeros(total, cols);
        for t in &inputs {
            expected = tensor::residual_add(&expected, t).unwrap();
        }
        let expected_parts = tensor::split_rows(&expected, &sizes).unwrap();

        let outs = run_ring(3, |g| {
            let (rank, bytes_before) = (g.rank(), g.counters().reduce_scatter);
            let out = g.reduce_scatter(&inputs[rank].clone(), &sizes)?;
            Ok((out, g.counters().reduce_scatter - bytes_before))
        });
        for (rank, (out, bytes)) in outs.iter().enumerate() {
            assert!(max_rel_error(out, &expected_parts[rank]) < 1e-6, "rank {rank}");
            // RS sends every segment except the rank's own.
            let expect = ((total - sizes[rank]) * cols * 4) as u64;
            assert_eq!(*bytes, expect);
        }
    }

    #[test]
    fn all_reduce_small_and_random() {
        let outs = run_ring(2, |g| {
            let local = Tensor::<f32>::from_fn(2, 2, |_, _| 1.0);
            g.all_reduce(&local)
        });
        for out in outs {
            assert!(out.data().iter().all(|&v| v == 2.0));
        }

        let world = 4;
        let inputs: Vec<Tensor<f32>> = (0..world).map(|r| random_rows(5, 3, 7 + r as u64)).collect();
        let mut expected = Tensor::<f32>::zeros(5, 3);
        for t in &inputs {
            expected = tensor::residual_add(&expected, t).unwrap();
        }
        let outs = run_ring(world, |g| g.all_reduce(&inputs[g.rank()].clone()));
        for out in outs {
            assert!(max_rel_error(&out, &expected) < 1e-6);
        }
    }

    #[test]
    fn all_reduce_volume_equals_reduce_scatter_plus_all_gather() {
        for world in [2usize, 3, 5] {
            let rows = 7;
            let cols = 3;
            let inputs: Vec<Tensor<f32>> =
                (0..world).map(|r| random_rows(rows, cols, 40 + r as u64)).collect();
            let stats = run_ring(world, |g| {
                let rank = g.rank();
                let ar_out = g.all_reduce(&inputs[rank].clone())?;
                let ar_bytes = g.counters().all_reduce;
                let sizes = crate::planner::equal_split(rows, g.world());
                let rs_out = g.reduce_scatter(&inputs[rank].clone(), &sizes)?;
                let ag_out = g.all_gather(&rs_out, &sizes)?;
                Ok((
                    ar_bytes,
                    g.counters().reduce_scatter + g.counters().all_gather,
                    max_rel_error(&ag_out, &ar_out),
                ))
            });
            for (rank, (ar, rs_plus_ag, diff)) in stats.iter().enumerate() {
                assert_eq!(ar, rs_plus_ag, "rank {rank} world {world}");
                assert_eq!(*diff, 0.0, "composition and all_reduce follow the same path");
            }
        }
    }

    #[test]
    fn overlapped_all_gather_gemm_matches_composition() {
        for world in [1usize, 2, 3, 5] {
            let cols = 6;
            let out_cols = 4;
            let sizes: Vec<usize> = (0..world).map(|r| 1 + (r * 2 + 1) % 3).collect();
            let weights: Vec<Tensor<f32>> =
                (0..world).map(|r| random_rows(cols, out_cols, 300 + r as u64)).collect();
            let locals: Vec<Tensor<f32>> =
                (0..world).map(|r| random_rows(sizes[r], cols, 200 + r as u64)).collect();

            let outs = run_ring(world, |g| {
                let rank = g.rank();
                let plain_bytes_before = g.counters().all_gather;
                let overlapped = g.all_gather_gemm_overlapped(
                    &locals[rank].clone(),
                    &weights[rank].clone(),
                    &sizes,
                    &Throttle::none(),
                )?;
                let overlapped_bytes = g.counters().all_gather - plain_bytes_before;
                let gathered = g.all_gather(&locals[rank].clone(), &sizes)?;
                let plain_bytes = g.counters().all_gather - plain_bytes_before - overlapped_bytes;
                let composed = tensor::gemm(&gathered, &weights[rank])?;
                Ok((max_rel_error(&overlapped, &composed), overlapped_bytes, plain_bytes))
            });
            for (rank, (err, overlapped_bytes, plain_bytes)) in outs.iter().enumerate() {
                assert!(*err < 1e-6, "rank {rank} world {world}: error {err}");
                assert_eq!(overlapped_bytes, plain_bytes, "rank {rank} world {world}");
            }
        }
    }

    #[test]
    fn overlapped_gemm_reduce_scatter_matches_composition() {
        for world in [1usize, 2, 3, 4] {
            let sizes: Vec<usize> = (0..world).map(|r| 2 + r % 2).collect();
            let total: usize = sizes.iter().sum();
            let inner = 5;
            let out_cols = 3;
            let acts: Vec<Tensor<f32>> =
                (0..world).map(|r| random_rows(total, inner, 400 + r as u64)).collect();
            let weights: Vec<Tensor<f32>> =
                (0..world).map(|r| random_rows(inner, out_cols, 500 + r as u64)).collect();

            let outs = run_ring(world, |g| {
                let rank = g.rank();
                let overlapped = g.gemm_reduce_scatter_overlapped(
                    &acts[rank].clone(),
                    &weights[rank].clone(),
                    &sizes,
                    &Throttle::none(),
                )?;
                let product = tensor::gemm(&acts[rank], &weights[rank])?;
                let composed = g.reduce_scatter(&product, &sizes)?;
                Ok(max_rel_error(&overlapped, &composed))
            });
            for (rank, err) in outs.iter().enumerate() {
                assert!(*err < 1e-5, "rank {rank} world {world}: error {err}");
            }
        }
    }

    #[test]
    fn overlapped_reduce_scatter_zero_weights_give_zero_output() {
        let sizes = [2usize, 2, 2];
        let outs = run_ring(3, |g| {
            let acts = random_rows(6, 4, g.rank() as u64);
            let zero_w = Tensor::<f32>::zeros(4, 3);
            g.gemm_reduce_scatter_overlapped(&acts, &zero_w, &sizes, &Throttle::none())
        });
        for out in outs {
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn overlapped_ops_handle_empty_segments() {
        let sizes = [1usize, 0, 2];
        let weights: Vec<Tensor<f32>> = (0..3).map(|r| random_rows(4, 2, 600 + r)).collect();
        let locals: Vec<Tensor<f32>> =
            (0..3).map(|r| random_rows(sizes[r as usize], 4, 700 + r)).collect();
        let outs = run_ring(3, |g| {
            let rank = g.rank();
            let overlapped = g.all_gather_gemm_overlapped(
                &locals[rank].clone(),
                &weights[rank].clone(),
                &sizes,
                &Throttle::none(),
            )?;
            let gathered = g.all_gather(&locals[rank].clone(), &sizes)?;
            Ok(max_rel_error(&overlapped, &tensor::gemm(&gathered, &weights[rank])?))
        });
        assert!(outs.iter().all(|&e| e < 1e-6));
    }

    #[test]
    fn injected_step_delays_change_nothing() {
        let sizes = [2usize, 1, 2];
        let total = 5;
        let acts: Vec<Tensor<f32>> = (0..3).map(|r| random_rows(total, 4, 800 + r)).collect();
        let weight = random_rows(4, 3, 900);

        let baseline = {
            let groups = RingGroup::loopback_ring(3, None).unwrap();
            run_on_groups(groups, |g| {
                g.gemm_reduce_scatter_overlapped(
                    &acts[g.rank()].clone(),
                    &weight.clone(),
                    &sizes,
                    &Throttle::none(),
                )
            })
        };
        let delayed = {
            let mut groups = RingGroup::loopback_ring(3, None).unwrap();
            for (i, g) in groups.iter_mut().enumerate() {
                g.inject_step_delay(0, 30, 42 + i as u64);
            }
            run_on_groups(groups, |g| {
                g.gemm_reduce_scatter_overlapped(
                    &acts[g.rank()].clone(),
                    &weight.clone(),
                    &sizes,
                    &Throttle::none(),
                )
            })
        };
        assert_eq!(baseline, delayed, "results depend on step timing");
    }

    #[test]
    fn size_mismatch_is_a_protocol_error() {
        let mut group = RingGroup::single();
        let local = random_rows(3, 2, 1);
        assert!(matches!(group.all_gather(&local, &[2]), Err(Error::Protocol(_))));
        assert!(matches!(group.reduce_scatter(&local, &[1, 1]), Err(Error::Protocol(_))));
    }
}
