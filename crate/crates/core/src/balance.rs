//! Seeded 50:50 class balancing of tile manifests, optionally with equal
//! per-patient quotas.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Tiles per tumor type when no target is given.
pub const DEFAULT_TARGET_PER_TYPE: usize = 20_000;

#[derive(Debug, thiserror::Error)]
pub enum BalanceError {
    #[error("class {label} has {available} tiles, {required} required (enable oversampling to draw with replacement)")]
    InsufficientClass { label: u8, available: usize, required: usize },
    #[error("only class {present} present; balancing needs both")]
    OneClassOnly { present: u8 },
    #[error("no entries to balance")]
    Empty,
    #[error("target {0} must be even and positive")]
    InvalidTarget(usize),
    #[error("entry {index} has no patient_id")]
    MissingPatientId { index: usize },
    #[error("entry {index}: label {label} is not 0 or 1")]
    InvalidLabel { index: usize, label: u8 },
    #[error("manifest line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One manifest line. A tile is named by `path` or by `slide_id` + grid coords.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slide_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<u32>,
    pub label: u8,
    pub tumor_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<TileManifestEntry>, BalanceError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| BalanceError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut writer: W, entries: &[TileManifestEntry]) -> Result<(), BalanceError> {
    for e in entries {
        serde_json::to_writer(&mut writer, e).map_err(io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn check_labels(entries: &[TileManifestEntry]) -> Result<(), BalanceError> {
    match entries.iter().enumerate().find(|(_, e)| e.label > 1) {
        Some((index, e)) => Err(BalanceError::InvalidLabel { index, label: e.label }),
        None => Ok(()),
    }
}

fn half_target(target_total: usize) -> Result<usize, BalanceError> {
    if target_total == 0 || !target_total.is_multiple_of(2) {
        return Err(BalanceError::InvalidTarget(target_total));
    }
    Ok(target_total / 2)
}

fn split_classes(entries: &[TileManifestEntry]) -> Result<[Vec<&TileManifestEntry>; 2], BalanceError> {
    if entries.is_empty() {
        return Err(BalanceError::Empty);
    }
    check_labels(entries)?;
    let (pos, neg): (Vec<_>, Vec<_>) = entries.iter().partition(|e| e.label == 1);
    match (neg.is_empty(), pos.is_empty()) {
        (true, _) => Err(BalanceError::OneClassOnly { present: 1 }),
        (_, true) => Err(BalanceError::OneClassOnly { present: 0 }),
        _ => Ok([neg, pos]),
    }
}

fn draw<'a>(
    pool: &[&'a TileManifestEntry],
    k: usize,
    label: u8,
    allow_oversample: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a TileManifestEntry>, BalanceError> {
    if pool.len() >= k {
        return Ok(pool.choose_multiple(rng, k).copied().collect());
    }
    if !allow_oversample {
        return Err(BalanceError::InsufficientClass {
            label,
            available: pool.len(),
            required: k,
        });
    }
    // Every entry once, the shortfall drawn with replacement.
    let mut out = pool.to_vec();
    out.extend((pool.len()..k).map(|_| pool[rng.random_range(0..pool.len())]));
    Ok(out)
}

/// Exactly `target_total / 2` entries per class, shuffled.
pub fn balance_cohort(
    entries: &[TileManifestEntry],
    target_total: usize,
    seed: u64,
    allow_oversample: bool,
) -> Result<Vec<TileManifestEntry>, BalanceError> {
    let half = half_target(target_total)?;
    let classes = split_classes(entries)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target_total);
    for (label, pool) in classes.iter().enumerate() {
        out.extend(draw(pool, half, label as u8, allow_oversample, &mut rng)?);
    }
    out.shuffle(&mut rng);
    Ok(out.into_iter().cloned().collect())
}

/// Per-patient share of one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientQuota {
    pub patient_id: String,
    pub available: usize,
    /// Even split, remainder to seeded-random patients.
    pub base: usize,
    /// After one round of deficit redistribution.
    pub assigned: usize,
}

fn spread(total: usize, patients: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut shares = vec![total / patients.len(); patients.len()];
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(rng);
    for &i in order.iter().take(total % patients.len()) {
        shares[i] += 1;
    }
    shares
}

/// Splits `quota` across patients (sorted by id). Patients short of their
/// share give everything they have; the deficit is spread once over the
/// others, bounded by what each still has.
pub fn plan_patient_quotas(
    available: &[(String, usize)],
    quota: usize,
    label: u8,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatientQuota>, BalanceError> {
    let all: Vec<usize> = (0..available.len()).collect();
    let base = spread(quota, &all, rng);
    let mut plan: Vec<PatientQuota> = available
        .iter()
        .zip(&base)
        .map(|((id, avail), &b)| PatientQuota {
            patient_id: id.clone(),
            available: *avail,
            base: b,
            assigned: b.min(*avail),
        })
        .collect();
    let deficit: usize = plan.iter().map(|p| p.base - p.assigned).sum();
    if deficit > 0 {
        let donors: Vec<usize> = (0..plan.len()).filter(|&i| plan[i].available > plan[i].base).collect();
        if !donors.is_empty() {
            let extra = spread(deficit, &donors, rng);
            for (&i, e) in donors.iter().zip(extra) {
                plan[i].assigned += e.min(plan[i].available - plan[i].assigned);
            }
        }
        let got: usize = plan.iter().map(|p| p.assigned).sum();
        if got < quota {
            return Err(BalanceError::InsufficientClass {
                label,
                available: available.iter().map(|(_, n)| n).sum(),
                required: quota,
            });
        }
    }
    Ok(plan)
}

/// Class balancing with per-(patient, class) quotas.
pub fn balance_by_patient(
    entries: &[TileManifestEntry],
    target_total: usize,
    seed: u64,
) -> Result<Vec<TileManifestEntry>, BalanceError> {
    let half = half_target(target_total)?;
    if let Some(index) = entries.iter().position(|e| e.patient_id.is_none()) {
        return Err(BalanceError::MissingPatientId { index });
    }
    let classes = split_classes(entries)?;
    let patients: Vec<&str> = {
        let mut ids: Vec<&str> = entries.iter().filter_map(|e| e.patient_id.as_deref()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target_total);
    for (label, pool) in classes.iter().enumerate() {
        let mut by_patient: BTreeMap<&str, Vec<&TileManifestEntry>> =
            patients.iter().map(|p| (*p, Vec::new())).collect();
        for e in pool {
            by_patient
                .get_mut(e.patient_id.as_deref().unwrap_or_default())
                .expect("patient listed")
                .push(e);
        }
        let available: Vec<(String, usize)> = by_patient.iter().map(|(p, v)| (p.to_string(), v.len())).collect();
        let plan = plan_patient_quotas(&available, half, label as u8, &mut rng)?;
        for q in plan {
            let tiles = &by_patient[q.patient_id.as_str()];
            out.extend(tiles.choose_multiple(&mut rng, q.assigned).copied());
        }
    }
    out.shuffle(&mut rng);
    Ok(out.into_iter().cloned().collect())
}

fn type_seed(seed: u64, tumor_type: &str) -> u64 {
    // FNV-1a over the name, so a type's draw does not depend on which other types exist.
    let h = tumor_type
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    seed ^ h
}

/// Balances every tumor type independently; output is grouped by type name.
pub fn balance_manifest(
    entries: &[TileManifestEntry],
    target_per_type: usize,
    seed: u64,
    allow_oversample: bool,
    by_patient: bool,
) -> Result<Vec<TileManifestEntry>, BalanceError> {
    let mut groups: BTreeMap<&str, Vec<TileManifestEntry>> = BTreeMap::new();
    for e in entries {
        groups.entry(&e.tumor_type).or_default().push(e.clone());
    }
    let mut out = Vec::new();
    for (tumor_type, group) in groups {
        let s = type_seed(seed, tumor_type);
        out.extend(if by_patient {
            balance_by_patient(&group, target_per_type, s)?
        } else {
            balance_cohort(&group, target_per_type, s, allow_oversample)?
        });
    }
    Ok(out)
}
