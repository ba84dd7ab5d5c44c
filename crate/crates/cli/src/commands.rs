//! Subcommand implementations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vstb::agent::{forward_batch, train, train_supervised, Agent, HeadKind};
use vstb::analysis::tables::{
    attention_timecourse, read_probe_dataset, value_timecourse, write_attention, write_confusion,
    write_probe_dataset, write_psychometric_fit, write_psychometric_points, write_sdt, write_train_log, write_values,
    SdtRow,
};
use vstb::analysis::{
    confusion, fit_logistic, grid_trials, parse_force, play_forced, read_trial_log, row_normalize, sdt, split_dataset,
    train_probe, write_trial_log, ForceSchedule, Probe, ProbeDataset, PsychometricPoint, SweepCondition, TrialRecord,
};
use vstb::environment::{render, sample_trial, CueValidity, DeltaSpec, RenderConfig, TrialRequest, TrialSpec, N_STEPS};
use vstb::model::PatchEncoder;
use vstb::vae::{pretrain, Vae};
use vstb::{Error, ParamStore, Result, Tensor};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::ExperimentConfig;
use crate::{AnalyzeKind, Command, Common, Grid, ProbeCommand, ProbeLabels};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::PretrainVae { common, out } => pretrain_vae(&common, &out),
        Command::Train {
            common,
            checkpoint,
            out,
            variant,
            supervised,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.agent.core.variant = v;
            }
            if let Some(m) = supervised {
                cfg.agent.head = HeadKind::Supervised(m);
            }
            train_cmd(cfg, checkpoint.as_deref(), &out)
        }
        Command::Eval {
            seed,
            checkpoint,
            out,
            grid,
        } => eval(&checkpoint, seed, &grid, &ForceSchedule::none(), &out),
        Command::Perturb {
            seed,
            checkpoint,
            out,
            grid,
            force,
        } => eval(&checkpoint, seed, &grid, &parse_force(&force)?, &out),
        Command::Analyze {
            kind,
            log,
            out,
            validity,
            cue_pos,
        } => {
            let records: Vec<TrialRecord> = read_trial_log(open(&log)?)?
                .into_iter()
                .filter(|r| validity.is_empty() || validity.contains(&r.validity))
                .filter(|r| cue_pos.is_empty() || cue_pos.contains(&r.cue_pos))
                .collect();
            analyze(kind, &records, &out)
        }
        Command::Probe { command } => probe(command),
        Command::Render {
            common,
            cue_pos,
            validity,
            delta,
            t,
            out,
        } => {
            let cfg = load_config(&common)?;
            let mut req = TrialRequest::new(cue_pos, CueValidity::new(validity)?, DeltaSpec::Fixed(delta));
            req.force_change = Some(delta != 0.0);
            req.sigma = cfg.task.sigma;
            let spec = sample_trial(cfg.seed, &req)?;
            render_cmd(&spec, t, &out)
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Fresh models with the config's shapes; weights are overwritten on
/// restore, so the construction RNG is irrelevant.
fn blank_encoder(cfg: &ExperimentConfig) -> (ParamStore<f32>, Vae) {
    let mut store = ParamStore::new();
    let vae = Vae::new(&mut store, cfg.vae, &mut ChaCha8Rng::seed_from_u64(0));
    (store, vae)
}

fn restore_encoder(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<PatchEncoder<f32>> {
    let (mut store, vae) = blank_encoder(cfg);
    ckpt.restore_store("encoder", &mut store)?;
    PatchEncoder::new(store, vae, RenderConfig::default())
}

/// Config, encoder and agent of a trained checkpoint.
pub fn load_agent(path: &Path) -> Result<(ExperimentConfig, PatchEncoder<f32>, Agent, ParamStore<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ExperimentConfig::parse(&ckpt.config)?;
    if ckpt.records_with_prefix("agent").next().is_none() {
        return Err(Error::MissingData(format!("{} holds no agent; run train first", path.display())));
    }
    let encoder = restore_encoder(&ckpt, &cfg)?;
    let mut store = ParamStore::new();
    let agent = Agent::new(&mut store, cfg.agent.clone(), &mut ChaCha8Rng::seed_from_u64(0));
    ckpt.restore_store("agent", &mut store)?;
    Ok((cfg, encoder, agent, store))
}

fn pretrain_encoder(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<(PatchEncoder<f32>, f64)> {
    let mut store = ParamStore::new();
    let vae = Vae::new(&mut store, cfg.vae, rng);
    let report = pretrain(&mut store, &vae, &cfg.pretrain, &RenderConfig::default(), rng)?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    Ok((PatchEncoder::new(store, vae, RenderConfig::default())?, last))
}

fn pretrain_vae(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (encoder, loss) = pretrain_encoder(&cfg, &mut rng)?;
    let mut ckpt = Checkpoint::new(cfg.to_text(), RngState::capture(&rng));
    ckpt.add_store("encoder", &encoder.store);
    ckpt.save(out)?;
    println!("pretrain-vae: {} steps, final loss {loss:.6}, wrote {}", cfg.pretrain.steps, out.display());
    Ok(())
}

fn train_cmd(mut cfg: ExperimentConfig, encoder_ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = match encoder_ckpt {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let enc_cfg = ExperimentConfig::parse(&ckpt.config)?;
            cfg.vae = enc_cfg.vae;
            cfg.pretrain = enc_cfg.pretrain;
            cfg.agent.core.d_features = cfg.vae.hidden;
            restore_encoder(&ckpt, &cfg)?
        }
        None => pretrain_encoder(&cfg, &mut rng)?.0,
    };
    let mut store = ParamStore::new();
    let agent = Agent::new(&mut store, cfg.agent.clone(), &mut rng);
    let log_path = if cfg.train_log.is_empty() {
        out.with_extension("train.csv")
    } else {
        PathBuf::from(&cfg.train_log)
    };
    let summary = match cfg.agent.head {
        HeadKind::ActorCritic => {
            let report = train(&mut store, &agent, &encoder, &cfg.train_config(), &mut rng)?;
            write_train_log(create(&log_path)?, &report.log)?;
            format!("mean reward {:.4}, {} updates", report.mean_reward(), report.updates)
        }
        HeadKind::Supervised(_) => {
            let losses = train_supervised(&mut store, &agent, &encoder, &cfg.supervised_config(), &mut rng)?;
            let mut w = csv::Writer::from_writer(create(&log_path)?);
            let fmt = |e: csv::Error| Error::Format(e.to_string());
            w.write_record(["update", "loss"]).map_err(fmt)?;
            for (i, l) in losses.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()]).map_err(fmt)?;
            }
            w.flush()?;
            format!("final loss {:.6}", losses.last().copied().unwrap_or(f64::NAN))
        }
    };
    let mut ckpt = Checkpoint::new(cfg.to_text(), RngState::capture(&rng));
    ckpt.add_store("encoder", &encoder.store);
    ckpt.add_store("agent", &store);
    ckpt.save(out)?;
    println!(
        "train: {} episodes, {summary}, wrote {} and {}",
        cfg.episodes,
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn grid_specs(cfg: &ExperimentConfig, seed: Option<u64>, grid: &Grid) -> Result<Vec<TrialSpec>> {
    let validities: Vec<CueValidity> = if grid.validity.is_empty() {
        cfg.task.validities.clone()
    } else {
        grid.validity.iter().map(|&v| CueValidity::new(v)).collect::<Result<_>>()?
    };
    let cues = if grid.cue_pos.is_empty() {
        cfg.task.cue_positions.clone()
    } else {
        grid.cue_pos.clone()
    };
    let deltas = if grid.delta_grid.is_empty() {
        cfg.eval_delta_grid.clone()
    } else {
        grid.delta_grid.clone()
    };
    let mut conditions = Vec::new();
    for &validity in &validities {
        for &cue_pos in &cues {
            for &delta in &deltas {
                conditions.push(SweepCondition {
                    cue_pos,
                    validity,
                    delta,
                    force_change: None,
                    force_location: None,
                    sigma: cfg.task.sigma,
                });
            }
        }
    }
    grid_trials(&conditions, grid.trials.unwrap_or(cfg.eval_trials), seed.unwrap_or(cfg.seed))
}

fn eval(checkpoint: &Path, seed: Option<u64>, grid: &Grid, schedule: &ForceSchedule, out: &Path) -> Result<()> {
    let (cfg, encoder, agent, store) = load_agent(checkpoint)?;
    let specs = grid_specs(&cfg, seed, grid)?;
    let results = play_forced(&store, &agent, &encoder, &specs, schedule, cfg.rl.gamma, cfg.eval_batch)?;
    let records: Vec<TrialRecord> = results.iter().enumerate().map(|(i, r)| TrialRecord::from_result(i, r)).collect();
    write_trial_log(create(out)?, &records)?;
    let reward = match records.len() {
        0 => "n/a".to_string(),
        n => format!("{:.4}", records.iter().map(|r| f64::from(r.reward)).sum::<f64>() / n as f64),
    };
    println!("{} trials under {schedule}, mean reward {reward}, wrote {}", records.len(), out.display());
    Ok(())
}

fn analyze(kind: AnalyzeKind, records: &[TrialRecord], out: &Path) -> Result<()> {
    match kind {
        AnalyzeKind::Psychometric => {
            let points = PsychometricPoint::from_records(records)?;
            write_psychometric_points(create(out)?, &points)?;
            println!("wrote {} psychometric points to {}", points.len(), out.display());
            let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.delta, p.rate)).collect();
            let fit = fit_logistic(&xy)?;
            let fit_path = out.with_extension("fit.csv");
            write_psychometric_fit(create(&fit_path)?, &fit)?;
            println!(
                "fit A={:.4} B={:.4} C={:.4} D={:.4}, wrote {}",
                fit.a(),
                fit.b(),
                fit.c(),
                fit.d(),
                fit_path.display()
            );
        }
        AnalyzeKind::Sdt => {
            let mut validities: Vec<f64> = records.iter().map(|r| r.validity).collect();
            validities.sort_by(f64::total_cmp);
            validities.dedup();
            let mut groups: Vec<(String, Vec<&TrialRecord>)> = validities
                .iter()
                .map(|&v| (format!("validity={v}"), records.iter().filter(|r| r.validity == v).collect()))
                .collect();
            groups.push(("all".into(), records.iter().collect()));
            let mut rows = Vec::new();
            for (label, group) in groups {
                let count = |o| group.iter().filter(|r| r.outcome == o).count();
                use vstb::environment::Outcome::*;
                match sdt(count(Hit), count(Miss), count(FalseAlarm), count(CorrectReject)) {
                    Ok(estimate) => rows.push(SdtRow { label, estimate }),
                    Err(Error::MissingData(m)) if label != "all" => eprintln!("skipping {label}: {m}"),
                    Err(e) => return Err(e),
                }
            }
            write_sdt(create(out)?, &rows)?;
            println!("wrote {} SDT rows to {}", rows.len(), out.display());
        }
        AnalyzeKind::Attention => {
            write_attention(create(out)?, &attention_timecourse(records)?)?;
            println!("wrote attention timecourse to {}", out.display());
        }
        AnalyzeKind::Value => {
            write_values(create(out)?, &value_timecourse(records)?)?;
            println!("wrote value timecourse to {}", out.display());
        }
    }
    Ok(())
}

fn probe(cmd: ProbeCommand) -> Result<()> {
    match cmd {
        ProbeCommand::Export {
            seed,
            checkpoint,
            out,
            grid,
            t,
            labels,
        } => {
            if t >= N_STEPS {
                return Err(Error::Config(format!("probe step {t} outside 0..{N_STEPS}")));
            }
            let (cfg, encoder, agent, store) = load_agent(&checkpoint)?;
            let specs = grid_specs(&cfg, seed, &grid)?;
            let d = agent.d_percept();
            let mut data = Vec::with_capacity(specs.len() * d);
            let mut y = Vec::with_capacity(specs.len());
            for chunk in specs.chunks(cfg.eval_batch.max(1)) {
                let feats: Vec<Vec<Tensor<f32>>> = chunk.iter().map(|s| encoder.encode_trial(s)).collect::<Result<_>>()?;
                let refs: Vec<&[Tensor<f32>]> = feats.iter().map(Vec::as_slice).collect();
                let fw = forward_batch(&store, &agent, &refs, &|_| Vec::new())?;
                for (b, spec) in chunk.iter().enumerate() {
                    data.extend_from_slice(&fw.percepts[t * chunk.len() + b]);
                    y.push(match labels {
                        ProbeLabels::Location => spec.change_position.map_or(4, |l| l.index()),
                        ProbeLabels::Change => usize::from(spec.is_change_trial),
                    });
                }
            }
            let n_classes = match labels {
                ProbeLabels::Location => 5,
                ProbeLabels::Change => 2,
            };
            let ds = ProbeDataset::new(Tensor::new(&[y.len(), d], data)?, y, n_classes)?;
            write_probe_dataset(create(&out)?, &ds)?;
            println!("exported {} memory states at t={t} to {}", ds.len(), out.display());
        }
        ProbeCommand::Train { dataset, common, out } => {
            let cfg = load_config(&common)?;
            let ds: ProbeDataset<f32> = read_probe_dataset(open(&dataset)?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (train_set, test_set) = split_dataset(&ds, cfg.probe_train_fraction, &mut rng);
            let probe = train_probe(&train_set, &cfg.probe, &mut rng)?;
            let acc = if test_set.is_empty() { f64::NAN } else { probe.accuracy(&test_set)? };
            let mut ckpt = Checkpoint::new(cfg.to_text(), RngState::capture(&rng));
            ckpt.add_store("probe", &probe.store);
            ckpt.save(&out)?;
            println!(
                "probe: {} train / {} test rows, test accuracy {acc:.4}, wrote {}",
                train_set.len(),
                test_set.len(),
                out.display()
            );
        }
        ProbeCommand::Eval {
            dataset,
            checkpoint,
            out,
            all,
            normalize,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = ExperimentConfig::parse(&ckpt.config)?;
            let probe = restore_probe(&ckpt)?;
            let ds: ProbeDataset<f32> = read_probe_dataset(open(&dataset)?)?;
            let test = if all {
                ds
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                split_dataset(&ds, cfg.probe_train_fraction, &mut rng).1
            };
            let counts = confusion(&probe, &test)?;
            let table: Vec<Vec<f64>> = if normalize {
                row_normalize(&counts)
            } else {
                counts.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
            };
            write_confusion(create(&out)?, &table)?;
            println!(
                "probe accuracy {:.4} on {} rows, wrote {}",
                probe.accuracy(&test)?,
                test.len(),
                out.display()
            );
        }
    }
    Ok(())
}

/// Rebuilds a probe from its `probe.probe.l{i}.w` layer shapes.
fn restore_probe(ckpt: &Checkpoint) -> Result<Probe<f32>> {
    let mut widths = Vec::new();
    for i in 0.. {
        let name = format!("probe.l{i}.w");
        match ckpt.records_with_prefix("probe").find(|(n, _)| *n == name) {
            Some((_, r)) if r.dims.len() == 2 => {
                if i == 0 {
                    widths.push(r.dims[0]);
                }
                widths.push(r.dims[1]);
            }
            Some(_) => return Err(Error::Format(format!("probe record {name} is not a matrix"))),
            None => break,
        }
    }
    if widths.len() < 2 {
        return Err(Error::MissingData("checkpoint holds no probe".into()));
    }
    let hidden = &widths[1..widths.len() - 1];
    let mut probe = Probe::new(widths[0], widths[widths.len() - 1], hidden, &mut ChaCha8Rng::seed_from_u64(0));
    ckpt.restore_store("probe", &mut probe.store)?;
    Ok(probe)
}

fn render_cmd(spec: &TrialSpec, t: Option<usize>, out: &Path) -> Result<()> {
    let cfg = RenderConfig::default();
    match t {
        Some(t) => {
            let mut w = create(out)?;
            render(spec, t, &cfg)?.write_pgm(&mut w)?;
            w.flush()?;
            println!("wrote {}", out.display());
        }
        None => {
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
            for t in 0..N_STEPS {
                let path = out.with_file_name(format!("{stem}_t{t}.pgm"));
                let mut w = create(&path)?;
                render(spec, t, &cfg)?.write_pgm(&mut w)?;
                w.flush()?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
