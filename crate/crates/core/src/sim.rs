//! One simulation run: the shared medium, traffic sources, and the event
//! handlers of both protocols.
//!
//! Both protocols use the same RTS/Response/Routing/Ack exchange, ACK
//! timeout and BEB retransmission. They differ in when a node starts an
//! exchange (BR: at a Transmitting epoch; baseline: as soon as it has data),
//! who answers an RTS, how frames reach the air (BR: directly, responses
//! after random slots; baseline: CSMA/CA), and how the next hop is chosen.

use std::collections::{HashMap, VecDeque};

use crate::aodv::{aodv_select_next, AodvParams, CsmaParams, CsmaState, CsmaStep, NextHop};
use crate::br::{BackoffVerdict, BrParams};
use crate::channel::Channel;
use crate::engine::{Engine, Event, EventKind, SimTime, TimerTag};
use crate::frame::{Frame, MessageType, NodeId, Rssi};
use crate::metrics::{
    DropReason, HopRecord, PacketOutcome, PacketRecord, Protocol, RoutingEmission, RunMetrics,
};
use crate::node::{Mode, NodeState, PacketMeta, Phase, ResponseRecord, Target};

#[derive(Debug, Clone, PartialEq)]
pub struct Traffic {
    pub sources: Vec<NodeId>,
    pub packets_per_source: u32,
    pub interval_ms: u64,
    pub start_ms: u64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub channel: Channel,
    pub br: BrParams,
    pub csma: CsmaParams,
    pub aodv: AodvParams,
    pub traffic: Traffic,
    pub horizon: SimTime,
    pub seed: u64,
    pub trace: bool,
}

/// One frame on the air.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirRecord {
    pub start: SimTime,
    pub end: SimTime,
    pub tx: NodeId,
    pub frame: Frame,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    /// Event trace, when requested.
    pub trace: Option<String>,
    /// Every transmission, when a trace was requested.
    pub air: Vec<AirRecord>,
    pub events: u64,
}

struct TxRecord {
    id: u64,
    tx: usize,
    start: SimTime,
    end: SimTime,
    packet: Option<PacketMeta>,
    attempt: u32,
}

#[derive(Debug, Clone, Copy)]
enum JobPurpose {
    Rts { handshake: u32 },
    Routing { handshake: u32, to: usize },
    Response { to: usize },
}

struct CsmaJob {
    id: u64,
    purpose: JobPurpose,
    state: CsmaState,
    cca_start: SimTime,
}

#[derive(Default)]
struct CopyCount {
    live: u32,
    delivered: bool,
    last_drop: Option<DropReason>,
}

pub struct Simulation {
    protocol: Protocol,
    engine: Engine,
    channel: Channel,
    br: BrParams,
    csma: CsmaParams,
    aodv: AodvParams,
    traffic: Traffic,
    horizon: SimTime,
    nodes: Vec<NodeState>,
    dest: usize,
    neighbours: Vec<Vec<usize>>,
    beacon_neighbours: Vec<usize>,
    txs: VecDeque<TxRecord>,
    next_tx_id: u64,
    jobs: Vec<VecDeque<CsmaJob>>,
    next_job_id: u64,
    copies: HashMap<u64, CopyCount>,
    generated: Vec<u32>,
    next_uid: u64,
    metrics: RunMetrics,
    keep_ms: u64,
    air: Option<Vec<AirRecord>>,
}

impl Simulation {
    pub fn new(cfg: RunConfig) -> Self {
        let RunConfig {
            protocol,
            channel,
            br,
            csma,
            aodv,
            traffic,
            horizon,
            seed,
            trace,
        } = cfg;
        let n = channel.len();
        let dest_id = channel.topology().destination();
        let dest = channel.index_of(dest_id).expect("destination in topology");
        let mut nodes: Vec<NodeState> = (0..n)
            .map(|i| NodeState::new(channel.id_at(i), i == dest))
            .collect();
        nodes[dest].dst_rssi = Some(channel.rssi_idx(dest, dest));
        let neighbours = (0..n)
            .map(|i| (0..n).filter(|&j| channel.hears_idx(i, j)).collect())
            .collect();
        let beacon_neighbours = (0..n).filter(|&j| channel.hears_beacon_idx(dest, j)).collect();
        let mut engine = Engine::new(seed);
        if trace {
            engine.enable_trace();
        }
        let keep_ms = channel.params().frame_airtime_ms.max(csma.cca_time_ms);
        Simulation {
            protocol,
            engine,
            metrics: RunMetrics::new(protocol, n, seed, dest_id),
            channel,
            br,
            csma,
            aodv,
            traffic,
            horizon,
            nodes,
            dest,
            neighbours,
            beacon_neighbours,
            txs: VecDeque::new(),
            next_tx_id: 0,
            jobs: (0..n).map(|_| VecDeque::new()).collect(),
            next_job_id: 0,
            copies: HashMap::new(),
            generated: vec![0; n],
            next_uid: 0,
            keep_ms,
            air: trace.then(Vec::new),
        }
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeState> {
        self.channel.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn seed_events(&mut self) {
        self.engine
            .schedule(SimTime::ZERO, EventKind::BeaconTick)
            .expect("start of time");
        if self.protocol == Protocol::Br {
            let epoch = self.br.epoch_time();
            for i in 0..self.nodes.len() {
                if i == self.dest {
                    continue;
                }
                let id = self.nodes[i].id;
                let p = self.br.relay_probability;
                self.flip_coin(i, p);
                let offset = self.engine.draw_uniform(id, epoch);
                self.engine
                    .schedule(SimTime(offset), EventKind::DecisionEpoch { node: id })
                    .expect("future");
            }
        }
        if self.traffic.packets_per_source > 0 {
            for src in self.traffic.sources.clone() {
                self.engine
                    .schedule(
                        SimTime(self.traffic.start_ms),
                        EventKind::TimerFire {
                            node: src,
                            tag: TimerTag::Generate,
                        },
                    )
                    .expect("future");
            }
        }
    }

    /// Runs to the horizon; undelivered packets are then counted as dropped.
    pub fn run(&mut self) {
        self.seed_events();
        while let Some(ev) = self.engine.pop_until(self.horizon) {
            self.handle(ev);
        }
        for (uid, rec) in self.metrics.packets.iter_mut() {
            if rec.outcome.is_none() {
                rec.outcome = Some(PacketOutcome::Dropped(DropReason::Horizon));
                if let Some(c) = self.copies.get_mut(uid) {
                    c.last_drop = Some(DropReason::Horizon);
                }
            }
        }
    }

    pub fn into_output(mut self) -> RunOutput {
        RunOutput {
            events: self.engine.processed(),
            trace: self.engine.take_trace(),
            air: self.air.unwrap_or_default(),
            metrics: self.metrics,
        }
    }

    fn idx(&self, id: NodeId) -> usize {
        self.channel
            .index_of(id)
            .unwrap_or_else(|| panic!("unknown node {}", id))
    }

    fn handle(&mut self, ev: Event) {
        match ev.kind {
            EventKind::BeaconTick => {
                let d = self.dest;
                let id = self.nodes[d].id;
                self.transmit(d, Frame::DstBcast { broadcast: id }, None, None, 0);
                self.engine.schedule_in(self.br.bcast_time_ms, EventKind::BeaconTick);
            }
            EventKind::DecisionEpoch { node } => self.on_epoch(self.idx(node)),
            EventKind::FrameArrival {
                rx, frame, tx_id, ..
            } => self.on_arrival(self.idx(rx), frame, tx_id),
            EventKind::TimerFire { node, tag } => {
                let i = self.idx(node);
                match tag {
                    TimerTag::Generate => self.on_generate(i),
                    TimerTag::ResponseWait { handshake } => self.on_response_wait(i, handshake),
                    TimerTag::AckWait { handshake } => self.on_ack_timeout(i, handshake),
                    TimerTag::BackoffDone { handshake } => self.on_backoff_done(i, handshake),
                    TimerTag::SendResponse { to } => {
                        let to = self.idx(to);
                        self.send_response(i, to);
                    }
                    TimerTag::CsmaBackoff { job } => self.on_csma_backoff(i, job),
                    TimerTag::CsmaCca { job } => self.on_csma_cca(i, job),
                }
            }
        }
    }

    // ---- medium -------------------------------------------------------

    fn transmit(
        &mut self,
        tx: usize,
        frame: Frame,
        to: Option<usize>,
        packet: Option<PacketMeta>,
        attempt: u32,
    ) {
        let now = self.engine.now();
        while let Some(front) = self.txs.front() {
            if front.end.ms() + self.keep_ms <= now.ms() {
                self.txs.pop_front();
            } else {
                break;
            }
        }
        let id = self.next_tx_id;
        self.next_tx_id += 1;
        let end = now.plus(self.channel.params().frame_airtime_ms);
        self.metrics.record_frame(frame.message_type());
        if let (Frame::Routing { hop_count, .. }, Some(to), Some(p)) = (frame, to, packet) {
            self.metrics.routing_log.push(RoutingEmission {
                time: now,
                packet_uid: p.uid,
                from: self.nodes[tx].id,
                to: self.nodes[to].id,
                hop_count,
            });
        }
        let tx_id = self.nodes[tx].id;
        if let Some(air) = &mut self.air {
            air.push(AirRecord {
                start: now,
                end,
                tx: tx_id,
                frame,
            });
        }
        let schedule = |engine: &mut Engine, rx_id: NodeId| {
            engine
                .schedule(
                    end,
                    EventKind::FrameArrival {
                        rx: rx_id,
                        tx: tx_id,
                        frame,
                        tx_id: id,
                    },
                )
                .expect("arrival is in the future");
        };
        match frame.message_type() {
            MessageType::SrcBcast => {
                for &rx in &self.neighbours[tx] {
                    schedule(&mut self.engine, self.nodes[rx].id);
                }
            }
            MessageType::DstBcast => {
                for &rx in &self.beacon_neighbours {
                    schedule(&mut self.engine, self.nodes[rx].id);
                }
            }
            _ => {
                if let Some(rx) = to {
                    if self.channel.hears_idx(tx, rx) {
                        schedule(&mut self.engine, self.nodes[rx].id);
                    }
                }
            }
        }
        self.txs.push_back(TxRecord {
            id,
            tx,
            start: now,
            end,
            packet,
            attempt,
        });
    }

    fn tx_record(&self, id: u64) -> Option<&TxRecord> {
        let pos = self.txs.binary_search_by_key(&id, |r| r.id).ok()?;
        self.txs.get(pos)
    }

    /// Half-duplex and SIR check of a finished transmission at `rx`.
    fn received(&self, rx: usize, rec: &TxRecord) -> bool {
        let overlapping = || {
            self.txs
                .iter()
                .filter(move |r| r.id != rec.id && r.start < rec.end && r.end > rec.start)
        };
        if overlapping().any(|r| r.tx == rx) {
            return false;
        }
        self.channel
            .sir_ok(rec.tx, rx, overlapping().map(|r| r.tx))
    }

    fn measure(&mut self, rx: usize, rssi: Rssi) -> Rssi {
        let jitter = self.channel.params().rssi_jitter_db;
        if jitter == 0 {
            return rssi;
        }
        let id = self.nodes[rx].id;
        rssi.offset(self.engine.stream(id).draw_symmetric(jitter))
    }

    fn on_arrival(&mut self, rx: usize, frame: Frame, tx_id: u64) {
        let Some(rec) = self.tx_record(tx_id) else {
            debug_assert!(false, "transmission record pruned before arrival");
            return;
        };
        if !self.received(rx, rec) {
            return;
        }
        let tx = rec.tx;
        let packet = rec.packet;
        let attempt = rec.attempt;
        match frame {
            Frame::DstBcast { .. } => {
                if !self.nodes[rx].is_destination {
                    let measured = self.measure(rx, self.channel.rssi_idx(tx, rx));
                    self.nodes[rx].on_dst_beacon(measured);
                }
            }
            Frame::SrcBcast { .. } => self.on_rts(rx, tx),
            Frame::Response {
                broadcast,
                responder,
                dst_rssi,
            } => {
                if broadcast == self.nodes[rx].id && self.nodes[rx].phase == Phase::AwaitResponses {
                    let link_rssi = self.measure(rx, self.channel.rssi_idx(tx, rx));
                    self.nodes[rx].responses.push(ResponseRecord {
                        responder,
                        dst_rssi,
                        link_rssi,
                    });
                }
            }
            Frame::Routing { recv, .. } => {
                if recv == self.nodes[rx].id {
                    if let Some(p) = packet {
                        self.on_routing(rx, tx, p, attempt);
                    }
                }
            }
            Frame::Ack { responder } => {
                if self.nodes[rx].phase == (Phase::AwaitAck { to: responder }) {
                    self.on_ack(rx);
                }
            }
        }
    }

    // ---- traffic and epochs ------------------------------------------

    fn on_generate(&mut self, i: usize) {
        let uid = self.next_uid;
        self.next_uid += 1;
        let now = self.engine.now();
        let packet = PacketMeta {
            uid,
            source: self.nodes[i].id,
            dest: self.nodes[self.dest].id,
            hop_count: 0,
        };
        self.metrics.packets.insert(
            uid,
            PacketRecord {
                source: packet.source,
                generated: now,
                outcome: None,
            },
        );
        self.copies.insert(
            uid,
            CopyCount {
                live: 1,
                ..CopyCount::default()
            },
        );
        self.nodes[i].queue.push_back(packet);
        self.generated[i] += 1;
        if self.generated[i] < self.traffic.packets_per_source {
            let id = self.nodes[i].id;
            self.engine.schedule_in(
                self.traffic.interval_ms,
                EventKind::TimerFire {
                    node: id,
                    tag: TimerTag::Generate,
                },
            );
        }
        self.maybe_start(i);
    }

    fn flip_coin(&mut self, i: usize, p: f64) -> Mode {
        let id = self.nodes[i].id;
        let mode = self.nodes[i].decision_epoch(self.engine.stream(id), p);
        self.metrics.epochs += 1;
        if mode == Mode::Listening {
            self.metrics.listening_epochs += 1;
        }
        mode
    }

    fn on_epoch(&mut self, i: usize) {
        let id = self.nodes[i].id;
        self.engine
            .schedule_in(self.br.epoch_time(), EventKind::DecisionEpoch { node: id });
        let mode = self.flip_coin(i, self.br.relay_probability);
        if mode == Mode::Transmitting && self.nodes[i].has_data() && self.nodes[i].phase == Phase::Idle {
            self.start_exchange(i);
        }
    }

    /// Baseline nodes start as soon as they are idle with data; BR nodes
    /// wait for a Transmitting epoch.
    fn maybe_start(&mut self, i: usize) {
        if self.protocol == Protocol::Aodv
            && self.nodes[i].has_data()
            && self.nodes[i].phase == Phase::Idle
        {
            self.start_exchange(i);
        }
    }

    // ---- sender side --------------------------------------------------

    fn start_exchange(&mut self, i: usize) {
        debug_assert!(self.nodes[i].has_data());
        let hs = self.nodes[i].next_handshake();
        self.nodes[i].responses.clear();
        match self.protocol {
            Protocol::Br => self.send_rts(i, hs),
            Protocol::Aodv => {
                self.nodes[i].phase = Phase::AccessRts;
                self.enqueue_job(i, JobPurpose::Rts { handshake: hs });
            }
        }
    }

    fn send_rts(&mut self, i: usize, hs: u32) {
        let id = self.nodes[i].id;
        self.nodes[i].phase = Phase::AwaitResponses;
        self.nodes[i].responses.clear();
        self.transmit(i, Frame::SrcBcast { broadcast: id }, None, None, 0);
        self.engine.schedule_in(
            self.br.response_wait_ms,
            EventKind::TimerFire {
                node: id,
                tag: TimerTag::ResponseWait { handshake: hs },
            },
        );
    }

    fn on_response_wait(&mut self, i: usize, hs: u32) {
        let node = &self.nodes[i];
        if node.handshake != hs || node.phase != Phase::AwaitResponses {
            return;
        }
        let Some(&packet) = node.queue.front() else {
            self.nodes[i].phase = Phase::Idle;
            return;
        };
        let dest_id = self.nodes[self.dest].id;
        let target = match self.protocol {
            Protocol::Br => match node.select_forwarder(&packet, self.br.loop_threshold) {
                Target::Shoot => dest_id,
                Target::Pass(r) => r,
            },
            Protocol::Aodv => {
                match aodv_select_next(node.dst_rssi, &node.responses, self.aodv.next_hop_metric) {
                    NextHop::Direct => dest_id,
                    NextHop::Relay(r) => r,
                }
            }
        };
        let to = self.idx(target);
        self.nodes[i].responses.clear();
        match self.protocol {
            Protocol::Br => self.send_routing(i, to, hs),
            Protocol::Aodv => {
                self.nodes[i].phase = Phase::AccessRouting { to: target };
                self.enqueue_job(i, JobPurpose::Routing { handshake: hs, to });
            }
        }
    }

    fn send_routing(&mut self, i: usize, to: usize, hs: u32) {
        let Some(&packet) = self.nodes[i].queue.front() else {
            self.nodes[i].phase = Phase::Idle;
            return;
        };
        let id = self.nodes[i].id;
        let recv = self.nodes[to].id;
        let frame = Frame::Routing {
            source: packet.source,
            dest: packet.dest,
            send: id,
            recv,
            hop_count: packet.hop_count,
        };
        let attempt = self.nodes[i].attempts + 1;
        self.nodes[i].phase = Phase::AwaitAck { to: recv };
        self.transmit(i, frame, Some(to), Some(packet), attempt);
        self.engine.schedule_in(
            self.br.ack_wait_ms,
            EventKind::TimerFire {
                node: id,
                tag: TimerTag::AckWait { handshake: hs },
            },
        );
    }

    fn on_ack(&mut self, i: usize) {
        let Some(packet) = self.nodes[i].queue.pop_front() else {
            return;
        };
        self.nodes[i].attempts = 0;
        self.nodes[i].phase = Phase::Idle;
        self.release_copy(packet.uid, None);
        self.maybe_start(i);
    }

    fn on_ack_timeout(&mut self, i: usize, hs: u32) {
        let node = &self.nodes[i];
        let Phase::AwaitAck { to } = node.phase else {
            return;
        };
        if node.handshake != hs {
            return;
        }
        let Some(&packet) = node.queue.front() else {
            return;
        };
        let now = self.engine.now();
        let to_idx = self.idx(to);
        self.metrics.record_hop(HopRecord {
            packet_uid: packet.uid,
            from: node.id,
            to,
            time: now,
            distance_m: self.channel.distance_idx(i, to_idx),
            success: false,
            attempts: node.attempts + 1,
            hop_count: packet.hop_count,
        });
        let id = node.id;
        let verdict = self.nodes[i].beb_backoff(self.engine.stream(id), &self.br, now);
        match verdict {
            BackoffVerdict::Retry(at) => {
                self.nodes[i].phase = Phase::Backoff;
                self.engine
                    .schedule(
                        at,
                        EventKind::TimerFire {
                            node: id,
                            tag: TimerTag::BackoffDone { handshake: hs },
                        },
                    )
                    .expect("backoff ends in the future");
            }
            BackoffVerdict::Drop => self.drop_head(i, DropReason::MaxAttempts),
        }
    }

    /// Retransmissions skip the relay coin.
    fn on_backoff_done(&mut self, i: usize, hs: u32) {
        let node = &self.nodes[i];
        if node.handshake != hs || node.phase != Phase::Backoff {
            return;
        }
        self.nodes[i].phase = Phase::Idle;
        if self.nodes[i].has_data() {
            self.start_exchange(i);
        }
    }

    fn drop_head(&mut self, i: usize, reason: DropReason) {
        self.nodes[i].attempts = 0;
        self.nodes[i].phase = Phase::Idle;
        if let Some(p) = self.nodes[i].queue.pop_front() {
            self.release_copy(p.uid, Some(reason));
        }
        self.maybe_start(i);
    }

    fn release_copy(&mut self, uid: u64, reason: Option<DropReason>) {
        let Some(c) = self.copies.get_mut(&uid) else {
            return;
        };
        c.live = c.live.saturating_sub(1);
        if reason.is_some() {
            c.last_drop = reason;
        }
        if c.live == 0 && !c.delivered {
            let why = c.last_drop.unwrap_or(DropReason::MaxAttempts);
            if let Some(rec) = self.metrics.packets.get_mut(&uid) {
                if rec.outcome.is_none() {
                    rec.outcome = Some(PacketOutcome::Dropped(why));
                }
            }
        }
    }

    // ---- receiver side ------------------------------------------------

    fn on_rts(&mut self, rx: usize, requester: usize) {
        let node = &self.nodes[rx];
        let responds = match self.protocol {
            Protocol::Br => node.responds_to_rts(),
            Protocol::Aodv => node.aodv_responds_to_rts(),
        };
        if !responds {
            return;
        }
        match self.protocol {
            Protocol::Br => {
                let id = node.id;
                let slots = self.engine.draw_uniform(id, self.br.response_slot_bound);
                let to = self.nodes[requester].id;
                self.engine.schedule_in(
                    slots * self.br.slot_time_ms,
                    EventKind::TimerFire {
                        node: id,
                        tag: TimerTag::SendResponse { to },
                    },
                );
            }
            Protocol::Aodv => self.enqueue_job(rx, JobPurpose::Response { to: requester }),
        }
    }

    fn send_response(&mut self, i: usize, to: usize) {
        let node = &self.nodes[i];
        let Some(dst_rssi) = node.dst_rssi else {
            return;
        };
        let frame = Frame::Response {
            broadcast: self.nodes[to].id,
            responder: node.id,
            dst_rssi,
        };
        self.transmit(i, frame, Some(to), None, 0);
    }

    fn on_routing(&mut self, rx: usize, tx: usize, packet: PacketMeta, attempt: u32) {
        let rx_id = self.nodes[rx].id;
        let tx_id = self.nodes[tx].id;
        self.transmit(rx, Frame::Ack { responder: rx_id }, Some(tx), None, 0);
        self.nodes[rx].record_forwarder(packet.uid, tx_id);

        let hops = packet.hop_count + 1;
        let now = self.engine.now();
        let hop = HopRecord {
            packet_uid: packet.uid,
            from: tx_id,
            to: rx_id,
            time: now,
            distance_m: self.channel.distance_idx(tx, rx),
            success: true,
            attempts: attempt.max(1),
            hop_count: packet.hop_count,
        };

        if rx == self.dest {
            let c = self.copies.entry(packet.uid).or_default();
            if c.delivered {
                return;
            }
            c.delivered = true;
            self.metrics.record_hop(hop);
            if let Some(rec) = self.metrics.packets.get_mut(&packet.uid) {
                rec.outcome = Some(PacketOutcome::Delivered { hops, at: now });
            }
            return;
        }

        if self.nodes[rx].holds(packet.uid) {
            return;
        }
        self.metrics.record_hop(hop);
        let c = self.copies.entry(packet.uid).or_default();
        c.live += 1;
        // The sender's copy is still live until its ACK arrives; any more
        // than that means an earlier ACK went missing.
        if c.live > 2 {
            self.metrics.duplicate_copies += 1;
        }
        if hops >= self.br.hop_cap() {
            self.release_copy(packet.uid, Some(DropReason::HopCap));
            return;
        }
        self.nodes[rx].queue.push_back(PacketMeta {
            hop_count: hops,
            ..packet
        });
        self.maybe_start(rx);
    }

    // ---- CSMA/CA ------------------------------------------------------

    fn enqueue_job(&mut self, i: usize, purpose: JobPurpose) {
        let id = self.next_job_id;
        self.next_job_id += 1;
        self.jobs[i].push_back(CsmaJob {
            id,
            purpose,
            state: CsmaState {
                be: self.csma.min_be,
                nb: 0,
            },
            cca_start: SimTime::ZERO,
        });
        if self.jobs[i].len() == 1 {
            self.start_job(i);
        }
    }

    fn start_job(&mut self, i: usize) {
        let node_id = self.nodes[i].id;
        let Some(job) = self.jobs[i].front_mut() else {
            return;
        };
        let (state, step) = CsmaState::start(&self.csma, self.engine.stream(node_id));
        job.state = state;
        let job_id = job.id;
        self.csma_step(i, job_id, step);
    }

    fn csma_step(&mut self, i: usize, job: u64, step: CsmaStep) {
        let node = self.nodes[i].id;
        match step {
            CsmaStep::Backoff(slots) => {
                self.engine.schedule_in(
                    slots * self.csma.slot_time_ms,
                    EventKind::TimerFire {
                        node,
                        tag: TimerTag::CsmaBackoff { job },
                    },
                );
            }
            CsmaStep::Transmit => {
                let done = self.jobs[i].pop_front().expect("active job");
                self.job_transmit(i, done.purpose);
                self.start_job(i);
            }
            CsmaStep::ChannelAccessFailure => {
                let done = self.jobs[i].pop_front().expect("active job");
                self.job_failed(i, done.purpose);
                self.start_job(i);
            }
        }
    }

    fn on_csma_backoff(&mut self, i: usize, job: u64) {
        let now = self.engine.now();
        let node = self.nodes[i].id;
        match self.jobs[i].front_mut() {
            Some(j) if j.id == job => j.cca_start = now,
            _ => return,
        }
        self.engine.schedule_in(
            self.csma.cca_time_ms,
            EventKind::TimerFire {
                node,
                tag: TimerTag::CsmaCca { job },
            },
        );
    }

    fn on_csma_cca(&mut self, i: usize, job: u64) {
        let now = self.engine.now();
        let node_id = self.nodes[i].id;
        let cca_start = match self.jobs[i].front() {
            Some(j) if j.id == job => j.cca_start,
            _ => return,
        };
        let busy = self.txs.iter().any(|r| {
            r.tx != i && self.channel.hears_idx(r.tx, i) && r.start < now && r.end > cca_start
        });
        let mut state = self.jobs[i].front().expect("active job").state;
        let step = state.on_cca(busy, &self.csma, self.engine.stream(node_id));
        self.jobs[i].front_mut().expect("active job").state = state;
        self.csma_step(i, job, step);
    }

    fn job_transmit(&mut self, i: usize, purpose: JobPurpose) {
        match purpose {
            JobPurpose::Rts { handshake } => {
                if self.nodes[i].handshake == handshake && self.nodes[i].phase == Phase::AccessRts {
                    self.send_rts(i, handshake);
                }
            }
            JobPurpose::Routing { handshake, to } => {
                let expected = Phase::AccessRouting {
                    to: self.nodes[to].id,
                };
                if self.nodes[i].handshake == handshake && self.nodes[i].phase == expected {
                    self.send_routing(i, to, handshake);
                }
            }
            JobPurpose::Response { to } => self.send_response(i, to),
        }
    }

    fn job_failed(&mut self, i: usize, purpose: JobPurpose) {
        let hs = match purpose {
            JobPurpose::Rts { handshake } | JobPurpose::Routing { handshake, .. } => handshake,
            JobPurpose::Response { .. } => return,
        };
        if self.nodes[i].handshake == hs
            && matches!(
                self.nodes[i].phase,
                Phase::AccessRts | Phase::AccessRouting { .. }
            )
        {
            self.drop_head(i, DropReason::ChannelAccess);
        }
    }
}

/// Builds and runs one simulation.
pub fn simulate(cfg: RunConfig) -> RunOutput {
    let mut sim = Simulation::new(cfg);
    sim.run();
    sim.into_output()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelParams, Position, Topology};

    fn line_sim() -> Simulation {
        let nodes = vec![
            (NodeId(0), Position::new(0.0, 0.0)),
            (NodeId(1), Position::new(3.0, 0.0)),
            (NodeId(2), Position::new(3.5, 0.0)),
        ];
        let topo = Topology::new(nodes, vec![], NodeId(0)).unwrap();
        let channel = Channel::new(topo, ChannelParams::default()).unwrap();
        Simulation::new(RunConfig {
            protocol: Protocol::Aodv,
            channel,
            br: BrParams::default(),
            csma: CsmaParams::default(),
            aodv: AodvParams::default(),
            traffic: Traffic {
                sources: vec![],
                packets_per_source: 0,
                interval_ms: 0,
                start_ms: 0,
            },
            horizon: SimTime::from_secs(1),
            seed: 1,
            trace: false,
        })
    }

    fn drain(sim: &mut Simulation, until: SimTime) {
        while let Some(ev) = sim.engine.pop_until(until) {
            sim.handle(ev);
        }
    }

    #[test]
    fn clean_beacon_updates_dst_rssi() {
        let mut sim = line_sim();
        sim.nodes[1].dst_rssi = Some(Rssi(-99));
        sim.transmit(0, Frame::DstBcast { broadcast: NodeId(0) }, None, None, 0);
        drain(&mut sim, SimTime(10));
        assert_eq!(sim.nodes[1].dst_rssi, Some(sim.channel.rssi_idx(0, 1)));
    }

    #[test]
    fn collided_beacon_keeps_old_dst_rssi() {
        let mut sim = line_sim();
        sim.nodes[1].dst_rssi = Some(Rssi(-99));
        sim.transmit(0, Frame::DstBcast { broadcast: NodeId(0) }, None, None, 0);
        sim.transmit(2, Frame::SrcBcast { broadcast: NodeId(2) }, None, None, 0);
        drain(&mut sim, SimTime(10));
        assert_eq!(sim.nodes[1].dst_rssi, Some(Rssi(-99)));
        // The interferer itself was transmitting.
        assert_eq!(sim.nodes[2].dst_rssi, None);
    }

    #[test]
    fn transmitter_is_deaf_while_sending() {
        let mut sim = line_sim();
        sim.transmit(1, Frame::SrcBcast { broadcast: NodeId(1) }, None, None, 0);
        sim.engine.schedule(SimTime(1), EventKind::BeaconTick).unwrap();
        drain(&mut sim, SimTime(2));
        assert_eq!(sim.nodes[1].dst_rssi, None);
        assert!(sim.nodes[2].dst_rssi.is_none());
    }

    #[test]
    fn old_transmissions_are_pruned() {
        let mut sim = line_sim();
        for t in [0u64, 100, 200] {
            sim.engine.schedule(SimTime(t), EventKind::BeaconTick).unwrap();
        }
        drain(&mut sim, SimTime(250));
        assert!(sim.txs.len() <= 1);
    }
}
