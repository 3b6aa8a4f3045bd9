//! Networked mode: the round loop of [`crate::orchestrator`] over TCP.
//!
//! The server accepts `n_clients` connections; the `n`-th accepted
//! connection is client `n`. Both sides load the same config, so the model,
//! shards and adapter seeds agree without being transmitted. Round `t`:
//!
//! 1. server → every client: `PLAN`;
//! 2. per client in id order: client → `ACTIVATIONS`, server → `CUT_GRAD`;
//! 3. every client → `BARRIER` with its importance numerators; the server
//!    steps its adapters once all barriers are in;
//! 4. aggregation rounds only: every client → one `ADAPTER_UPLOAD` per
//!    adapter; server → every client: one `AGG_UPDATE` per merged weight,
//!    then a closing `BARRIER`.
//!
//! No message of round `t + 1` is sent before every barrier of round `t`
//! has been received. Matrices cross the wire in `f32`, so a networked run
//! tracks the simulator closely but not bit-for-bit.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Instant;

use thiserror::Error;

use crate::aggregation::AdapterUpload;
use crate::dataset::Shard;
use crate::lora::{LoraAdapter, LoraError};
use crate::model::{AdapterSet, ModelError, ModelParams, SplitPoint, WeightId};
use crate::orchestrator::{
    adapter_seed, aggregate_round, model_seed, reinit_seed, round_report, summarize, sync_adapters, AdapterHolder,
    ClientSim, ExperimentConfig, ExperimentOutcome, OrchestratorError, Planner, ServerSim, SERVER_ID,
};
use crate::tensor::Matrix;
use crate::wire::{
    from_wire, read_message, to_wire, write_message, Activations, AggUpdate, Barrier, CutGrad, PlanMessage, WireError,
    WireMessage,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error("protocol violation: expected {expected}, got {got}")]
    Protocol { expected: String, got: String },
}

pub type Result<T> = std::result::Result<T, NetError>;

struct Peer {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Peer {
    fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn send(&mut self, m: &WireMessage) -> Result<()> {
        write_message(&mut self.writer, m)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage> {
        Ok(read_message(&mut self.reader)?)
    }
}

fn unexpected(expected: impl Into<String>, got: &WireMessage) -> NetError {
    NetError::Protocol {
        expected: expected.into(),
        got: got.name().to_string(),
    }
}

fn check(what: &str, expected: u32, got: u32) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NetError::Protocol {
            expected: format!("{what} {expected}"),
            got: format!("{what} {got}"),
        })
    }
}

fn round_u32(t: usize) -> u32 {
    u32::try_from(t).expect("validated round count fits in u32")
}

fn upload_of(client_id: u32, ad: &LoraAdapter<f64>, n_samples: u64) -> Result<AdapterUpload<f32>> {
    Ok(AdapterUpload {
        client_id,
        weight_id: ad.weight_id(),
        b: to_wire(ad.b())?,
        a: to_wire(ad.a())?,
        n_samples,
    })
}

/// Runs the server side on `listener` until every round is done.
pub fn serve(config: ExperimentConfig, listener: &TcpListener) -> Result<ExperimentOutcome> {
    config.validate()?;
    let cfg = &config;
    let mut peers = Vec::with_capacity(cfg.n_clients);
    while peers.len() < cfg.n_clients {
        let (stream, _) = listener.accept()?;
        peers.push(Peer::new(stream)?);
    }
    let n_samples = cfg.dataset.samples_per_client as u64;
    let mut params = ModelParams::<f64>::build(cfg.model, model_seed(cfg.seed))?;
    let mut server = ServerSim::default();
    let mut planner = Planner::new(cfg)?;
    let mut pending: Option<Vec<(u64, BTreeMap<WeightId, f64>)>> = None;
    let ids: Vec<u32> = (0..cfg.n_clients as u32).collect();
    let mut reports = Vec::with_capacity(cfg.total_rounds);

    for t in 1..=cfg.total_rounds {
        let started = Instant::now();
        let tw = round_u32(t);
        if let Some(obs) = pending.take() {
            planner.observe(&obs, t - 1);
        }
        let decision = planner.decide(cfg.budgets_at(t)?)?;
        let plan = &decision.plan;
        let split = plan.split;
        sync_adapters(&mut server.adapters, &plan.server_assignment, cfg.model.d_model, |w| {
            adapter_seed(cfg.seed, SERVER_ID, t, w)
        })?;
        for (n, peer) in peers.iter_mut().enumerate() {
            peer.send(&WireMessage::Plan(PlanMessage {
                round: tw,
                client_id: ids[n],
                split_j: split.j() as u16,
                assignment: plan.client_assignments[n].clone(),
            }))?;
        }

        let mut losses = Vec::with_capacity(peers.len());
        let mut server_nums = Vec::with_capacity(peers.len());
        for (n, peer) in peers.iter_mut().enumerate() {
            let act = match peer.recv()? {
                WireMessage::Activations(a) => a,
                other => return Err(unexpected("ACTIVATIONS", &other)),
            };
            check("client", ids[n], act.client_id)?;
            check("round", tw, act.round)?;
            let out = server.process(&params, split, &from_wire(&act.cut), &act.targets)?;
            peer.send(&WireMessage::CutGrad(CutGrad {
                client_id: ids[n],
                round: tw,
                loss: out.loss,
                grad: to_wire(&out.cut_grad)?,
            }))?;
            losses.push(out.loss);
            server_nums.push(out.numerators);
        }

        let mut obs = Vec::with_capacity(peers.len());
        for (n, peer) in peers.iter_mut().enumerate() {
            let b = match peer.recv()? {
                WireMessage::Barrier(b) => b,
                other => return Err(unexpected("BARRIER", &other)),
            };
            check("client", ids[n], b.client_id)?;
            check("round", tw, b.round)?;
            let mut nums: BTreeMap<WeightId, f64> = b.numerators.into_iter().collect();
            nums.extend(std::mem::take(&mut server_nums[n]));
            obs.push((n_samples, nums));
        }
        server.step(cfg.learning_rate, cfg.grad_clip)?;
        pending = Some(obs);

        let aggregated = t.is_multiple_of(cfg.agg_period);
        if aggregated {
            let mut shadows: Vec<AdapterSet<f64>> = Vec::with_capacity(peers.len());
            for (n, peer) in peers.iter_mut().enumerate() {
                let mut set = AdapterSet::new();
                for _ in 0..plan.client_assignments[n].len() {
                    let u = match peer.recv()? {
                        WireMessage::AdapterUpload(u) => u,
                        other => return Err(unexpected("ADAPTER_UPLOAD", &other)),
                    };
                    check("client", ids[n], u.client_id)?;
                    set.insert(u.weight_id, LoraAdapter::from_factors(u.weight_id, from_wire(&u.b), from_wire(&u.a))?);
                }
                shadows.push(set);
            }
            let mut holders: Vec<AdapterHolder> = shadows
                .iter_mut()
                .enumerate()
                .map(|(n, adapters)| AdapterHolder {
                    client_id: ids[n],
                    n_samples,
                    adapters,
                })
                .collect();
            let merged = aggregate_round(
                &mut params,
                &mut holders,
                &mut server,
                split,
                cfg.aggregator,
                cfg.aggregation_mode,
                reinit_seed(cfg.seed, t),
            )?;
            for (n, peer) in peers.iter_mut().enumerate() {
                for (id, delta) in &merged {
                    let fresh_a = shadows[n].get(id).map(|ad| to_wire(ad.a())).transpose()?;
                    peer.send(&WireMessage::AggUpdate(AggUpdate {
                        weight_id: *id,
                        delta: to_wire(delta)?,
                        fresh_a,
                    }))?;
                }
                peer.send(&WireMessage::Barrier(Barrier {
                    round: tw,
                    client_id: ids[n],
                    numerators: Vec::new(),
                }))?;
            }
        }

        reports.push(round_report(cfg, t, &decision, &ids, &losses, aggregated, started.elapsed())?);
    }
    for peer in &mut peers {
        peer.writer.flush()?;
    }
    let summary = summarize(&reports);
    Ok(ExperimentOutcome { reports, summary })
}

/// What a client saw during a networked run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub client_id: u32,
    /// Loss reported by the server, per round.
    pub losses: Vec<f64>,
}

/// Runs one client over `stream` until every round is done.
pub fn run_client(config: ExperimentConfig, stream: TcpStream) -> Result<ClientOutcome> {
    config.validate()?;
    let cfg = &config;
    let mut peer = Peer::new(stream)?;
    let mut params = ModelParams::<f64>::build(cfg.model, model_seed(cfg.seed))?;
    let mut client: Option<ClientSim> = None;
    let mut losses = Vec::with_capacity(cfg.total_rounds);

    for t in 1..=cfg.total_rounds {
        let tw = round_u32(t);
        let plan = match peer.recv()? {
            WireMessage::Plan(p) => p,
            other => return Err(unexpected("PLAN", &other)),
        };
        check("round", tw, plan.round)?;
        let c = client.get_or_insert_with(|| ClientSim {
            client_id: plan.client_id,
            shard: Shard::generate(cfg.dataset, cfg.model.vocab_size, cfg.model.seq_len, plan.client_id, cfg.seed),
            adapters: AdapterSet::new(),
        });
        check("client", c.client_id, plan.client_id)?;
        let id = c.client_id;
        let split = SplitPoint::new(plan.split_j as usize, cfg.model.n_blocks)?;
        sync_adapters(&mut c.adapters, &plan.assignment, cfg.model.d_model, |w| adapter_seed(cfg.seed, id, t, w))?;

        let step = c.forward(&params, split, t, cfg.batch_size)?;
        peer.send(&WireMessage::Activations(Activations {
            client_id: id,
            round: tw,
            cut: to_wire(&step.cut)?,
            targets: step.targets.clone(),
        }))?;
        let g = match peer.recv()? {
            WireMessage::CutGrad(g) => g,
            other => return Err(unexpected("CUT_GRAD", &other)),
        };
        check("round", tw, g.round)?;
        losses.push(g.loss);
        let nums = c.backward(&params, step, &from_wire(&g.grad), cfg.learning_rate, cfg.grad_clip)?;
        peer.send(&WireMessage::Barrier(Barrier {
            round: tw,
            client_id: id,
            numerators: nums.into_iter().collect(),
        }))?;

        if t.is_multiple_of(cfg.agg_period) {
            let n_samples = c.shard.len() as u64;
            for ad in c.adapters.values() {
                peer.send(&WireMessage::AdapterUpload(upload_of(id, ad, n_samples)?))?;
            }
            loop {
                match peer.recv()? {
                    WireMessage::AggUpdate(u) => {
                        params.merge_update(u.weight_id, &from_wire(&u.delta))?;
                        if let Some(a) = u.fresh_a {
                            let a = from_wire(&a);
                            let b = Matrix::zeros(cfg.model.d_model, a.rows());
                            c.adapters.insert(u.weight_id, LoraAdapter::from_factors(u.weight_id, b, a)?);
                        }
                    }
                    WireMessage::Barrier(b) => {
                        check("round", tw, b.round)?;
                        break;
                    }
                    other => return Err(unexpected("AGG_UPDATE or BARRIER", &other)),
                }
            }
        }
    }
    Ok(ClientOutcome {
        client_id: client.map(|c| c.client_id).unwrap_or(0),
        losses,
    })
}
