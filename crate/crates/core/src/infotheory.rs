//! Plug-in transfer entropy between discretized state and control series.
//!
//! `TE(X -> Y) = sum p(y', y^(k), x^(l)) log2[ p(y' | y^(k), x^(l)) / p(y' | y^(k)) ]`
//! where `y'` is the next symbol of `Y` and `y^(k)`, `x^(l)` are the latest
//! `k` and `l` symbols of each series.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::commloop::Exchange;
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

/// Integer symbols in `[0, n_bins)` with a description of where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolSeries {
    pub symbols: Vec<u32>,
    pub n_bins: u32,
    pub channel: String,
    pub update_period: Option<f64>,
}

impl SymbolSeries {
    pub fn new(symbols: Vec<u32>, n_bins: u32) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::invalid("n_bins must be >= 1"));
        }
        if let Some(&s) = symbols.iter().find(|&&s| s >= n_bins) {
            return Err(Error::invalid(format!("symbol {s} out of range for {n_bins} bins")));
        }
        Ok(Self {
            symbols,
            n_bins,
            channel: String::new(),
            update_period: None,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Cut points given as quantile probabilities of the series itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBinning {
    pub probabilities: Vec<f64>,
}

impl QuantileBinning {
    /// 5th/95th percentiles for three bins, equal-probability cuts otherwise.
    pub fn default_for(n_bins: u32) -> Self {
        let probabilities = if n_bins == 3 {
            vec![0.05, 0.95]
        } else {
            (1..n_bins).map(|i| i as f64 / n_bins as f64).collect()
        };
        Self { probabilities }
    }

    fn validate(&self, n_bins: u32) -> Result<()> {
        if self.probabilities.len() + 1 != n_bins as usize {
            return Err(Error::invalid(format!(
                "{} cut probabilities cannot make {n_bins} bins",
                self.probabilities.len()
            )));
        }
        let ok = self.probabilities.iter().all(|p| (0.0..=1.0).contains(p))
            && self.probabilities.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(Error::invalid("cut probabilities must be non-decreasing in [0, 1]"));
        }
        Ok(())
    }
}

/// Linear-interpolation sample quantile (R type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Maps each value to the number of cut points strictly below it; values on a
/// cut go to the lower bin.
///
/// A type-7 quantile at probability `p` always lies in
/// `[v[floor((n-1)p)], v[floor((n-1)p) + 1])` of the sorted data, so the
/// comparison is done against that order statistic. This keeps the symbols
/// exactly rank based.
pub fn discretize(series: &[f64], n_bins: u32, binning: &QuantileBinning) -> Result<SymbolSeries> {
    if series.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: series.len(),
        });
    }
    if n_bins < 2 {
        return Err(Error::invalid("n_bins must be >= 2"));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contains non-finite values"));
    }
    binning.validate(n_bins)?;

    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    let cuts: Vec<f64> = binning
        .probabilities
        .iter()
        .map(|&p| sorted[(last * p).floor() as usize])
        .collect();
    let symbols = series
        .iter()
        .map(|v| cuts.iter().filter(|&&c| c < *v).count() as u32)
        .collect();
    SymbolSeries::new(symbols, n_bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeResult {
    /// Plug-in estimate.
    pub te_bits: f64,
    /// Plug-in estimate minus the mean over shuffled-source surrogates; not
    /// floored. Equal to `te_bits` when no surrogates were computed.
    pub effective_te_bits: f64,
    pub k: usize,
    pub l: usize,
    pub n_samples: usize,
    pub n_bins: u32,
    pub direction: String,
}

fn history(series: &[u32], end: usize, len: usize, base: u64) -> u64 {
    series[end + 1 - len..=end]
        .iter()
        .fold(0u64, |acc, &s| acc * base + s as u64)
}

#[derive(Default)]
struct TeCounts {
    joint: BTreeMap<(u32, u64, u64), u64>,
    n: u64,
}

impl TeCounts {
    fn add_segment(&mut self, x: &[u32], y: &[u32], k: usize, l: usize, bx: u64, by: u64) {
        let lag = k.max(l);
        if y.len() <= lag {
            return;
        }
        for t in lag - 1..y.len() - 1 {
            let key = (y[t + 1], history(y, t, k, by), history(x, t, l, bx));
            *self.joint.entry(key).or_default() += 1;
            self.n += 1;
        }
    }

    fn te_bits(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
        let mut hist_src: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        let mut next_hist: BTreeMap<(u32, u64), u64> = BTreeMap::new();
        for (&(yn, yh, xh), &c) in &self.joint {
            *hist.entry(yh).or_default() += c;
            *hist_src.entry((yh, xh)).or_default() += c;
            *next_hist.entry((yn, yh)).or_default() += c;
        }
        let n = self.n as f64;
        self.joint
            .iter()
            .map(|(&(yn, yh, xh), &c)| {
                let c = c as f64;
                let ratio = c * hist[&yh] as f64 / (hist_src[&(yh, xh)] as f64 * next_hist[&(yn, yh)] as f64);
                c / n * ratio.log2()
            })
            .sum()
    }
}

fn check_pair(x: &SymbolSeries, y: &SymbolSeries, k: usize, l: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if k == 0 || l == 0 {
        return Err(Error::invalid("history lengths must be >= 1"));
    }
    Ok(())
}

fn result_from(counts: &TeCounts, k: usize, l: usize, n_bins: u32, direction: String) -> TeResult {
    let upper = (n_bins as f64).log2();
    // the estimate is a conditional mutual information; clip float round-off
    let te = counts.te_bits().clamp(0.0, upper);
    TeResult {
        te_bits: te,
        effective_te_bits: te,
        k,
        l,
        n_samples: counts.n as usize,
        n_bins,
        direction,
    }
}

fn direction(x: &SymbolSeries, y: &SymbolSeries) -> String {
    match (x.channel.is_empty(), y.channel.is_empty()) {
        (false, false) => format!("{}->{}", x.channel, y.channel),
        _ => "x->y".to_string(),
    }
}

/// Transfer entropy from `x` to `y` with `k` symbols of `y` history and `l`
/// of `x` history.
pub fn transfer_entropy(x: &SymbolSeries, y: &SymbolSeries, k: usize, l: usize) -> Result<TeResult> {
    check_pair(x, y, k, l)?;
    if x.len() < k + l + 1 {
        return Err(Error::InsufficientData {
            needed: k + l + 1,
            got: x.len(),
        });
    }
    let mut counts = TeCounts::default();
    counts.add_segment(&x.symbols, &y.symbols, k, l, x.n_bins as u64, y.n_bins as u64);
    Ok(result_from(&counts, k, l, y.n_bins, direction(x, y)))
}

/// Pools transitions from several independent segments without crossing
/// segment boundaries. Segments too short for the histories add nothing.
pub fn transfer_entropy_pooled(segments: &[(SymbolSeries, SymbolSeries)], k: usize, l: usize) -> Result<TeResult> {
    let Some((x0, y0)) = segments.first() else {
        return Err(Error::InsufficientData { needed: k + l + 1, got: 0 });
    };
    let total: usize = segments.iter().map(|(x, _)| x.len()).sum();
    if total < k + l + 1 {
        return Err(Error::InsufficientData {
            needed: k + l + 1,
            got: total,
        });
    }
    let mut counts = TeCounts::default();
    for (x, y) in segments {
        check_pair(x, y, k, l)?;
        if x.n_bins != x0.n_bins || y.n_bins != y0.n_bins {
            return Err(Error::invalid("segments must share bin counts"));
        }
        counts.add_segment(&x.symbols, &y.symbols, k, l, x.n_bins as u64, y.n_bins as u64);
    }
    if counts.n == 0 {
        return Err(Error::InsufficientData {
            needed: k.max(l) + 1,
            got: segments.iter().map(|(x, _)| x.len()).max().unwrap_or(0),
        });
    }
    Ok(result_from(&counts, k, l, y0.n_bins, direction(x0, y0)))
}

/// Raw transfer entropy together with a shuffled-source bias correction.
pub fn effective_te<R: Rng + ?Sized>(
    x: &SymbolSeries,
    y: &SymbolSeries,
    k: usize,
    l: usize,
    n_shuffles: usize,
    rng: &mut R,
) -> Result<TeResult> {
    effective_te_pooled(&[(x.clone(), y.clone())], k, l, n_shuffles, rng)
}

/// [`effective_te`] over pooled segments; each segment's source is shuffled
/// within itself.
pub fn effective_te_pooled<R: Rng + ?Sized>(
    segments: &[(SymbolSeries, SymbolSeries)],
    k: usize,
    l: usize,
    n_shuffles: usize,
    rng: &mut R,
) -> Result<TeResult> {
    if n_shuffles == 0 {
        return Err(Error::invalid("n_shuffles must be >= 1"));
    }
    let mut res = transfer_entropy_pooled(segments, k, l)?;
    let mut sources: Vec<Vec<u32>> = segments.iter().map(|(x, _)| x.symbols.clone()).collect();
    let mut acc = 0.0;
    for _ in 0..n_shuffles {
        let mut counts = TeCounts::default();
        for (src, (x, y)) in sources.iter_mut().zip(segments) {
            src.shuffle(rng);
            counts.add_segment(src, &y.symbols, k, l, x.n_bins as u64, y.n_bins as u64);
        }
        acc += counts.te_bits();
    }
    res.effective_te_bits = res.te_bits - acc / n_shuffles as f64;
    Ok(res)
}

/// State channel feeding a control channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelPair {
    TemperatureToHeat,
    PressureToPiston,
}

impl ChannelPair {
    pub const ALL: [ChannelPair; 2] = [ChannelPair::TemperatureToHeat, ChannelPair::PressureToPiston];

    pub fn label(self) -> &'static str {
        match self {
            ChannelPair::TemperatureToHeat => "temperature->heat_rate",
            ChannelPair::PressureToPiston => "pressure->piston_rate",
        }
    }

    /// Uploaded state values and commanded control values at each exchange.
    pub fn extract(self, exchanges: &[Exchange]) -> (Vec<f64>, Vec<f64>) {
        exchanges
            .iter()
            .map(|e| match self {
                ChannelPair::TemperatureToHeat => (e.state.temperature, e.commanded.heat_rate),
                ChannelPair::PressureToPiston => (e.state.pressure, e.commanded.piston_rate),
            })
            .unzip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeSettings {
    pub n_bins: u32,
    pub k: usize,
    pub l: usize,
    pub n_shuffles: usize,
}

impl Default for TeSettings {
    fn default() -> Self {
        Self {
            n_bins: 3,
            k: 1,
            l: 1,
            n_shuffles: 100,
        }
    }
}

/// Exchange records of several runs at one update period.
#[derive(Debug, Clone)]
pub struct PeriodRuns {
    pub update_period: f64,
    pub runs: Vec<Vec<Exchange>>,
}

#[derive(Debug)]
pub struct TeCell {
    pub pair: ChannelPair,
    pub update_period: f64,
    pub result: Result<TeResult>,
}

/// One cell per (period, channel pair). Values are discretized on the pooled
/// runs of each period; transitions never span two runs.
pub fn te_table(inputs: &[PeriodRuns], settings: &TeSettings, seed: u64) -> Vec<TeCell> {
    let binning = QuantileBinning::default_for(settings.n_bins);
    let mut cells = Vec::with_capacity(inputs.len() * 2);
    for (pi, period) in inputs.iter().enumerate() {
        for (ci, pair) in ChannelPair::ALL.into_iter().enumerate() {
            let mut rng = substream(seed, Purpose::Shuffle, pi as u8, ci as u16, 0);
            let result = te_cell(period, pair, settings, &binning, &mut rng);
            cells.push(TeCell {
                pair,
                update_period: period.update_period,
                result,
            });
        }
    }
    cells
}

fn te_cell<R: Rng + ?Sized>(
    period: &PeriodRuns,
    pair: ChannelPair,
    settings: &TeSettings,
    binning: &QuantileBinning,
    rng: &mut R,
) -> Result<TeResult> {
    let split: Vec<(Vec<f64>, Vec<f64>)> = period.runs.iter().map(|r| pair.extract(r)).collect();
    let total: usize = split.iter().map(|(x, _)| x.len()).sum();
    let needed = settings.k + settings.l + 1;
    if total < needed {
        return Err(Error::InsufficientData { needed, got: total });
    }
    let xs: Vec<f64> = split.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let ys: Vec<f64> = split.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    let mut xsym = discretize(&xs, settings.n_bins, binning)?.symbols.into_iter();
    let mut ysym = discretize(&ys, settings.n_bins, binning)?.symbols.into_iter();
    let (src, dst) = pair.label().split_once("->").unwrap_or(("x", "y"));
    let mut segments = Vec::with_capacity(split.len());
    for (x, _) in &split {
        let n = x.len();
        let mut sx = SymbolSeries::new(xsym.by_ref().take(n).collect(), settings.n_bins)?;
        let mut sy = SymbolSeries::new(ysym.by_ref().take(n).collect(), settings.n_bins)?;
        sx.channel = src.to_string();
        sy.channel = dst.to_string();
        sx.update_period = Some(period.update_period);
        sy.update_period = Some(period.update_period);
        segments.push((sx, sy));
    }
    effective_te_pooled(&segments, settings.k, settings.l, settings.n_shuffles, rng)
}

pub const TE_CSV_HEADER: &str = "direction,update_period,te_bits,effective_te_bits,n_samples,k,l,n_bins";

/// Failed cells are written with `nan` estimates and zero samples.
pub fn write_te_csv<W: Write>(mut w: W, cells: &[TeCell], settings: &TeSettings) -> std::io::Result<()> {
    writeln!(w, "{TE_CSV_HEADER}")?;
    for c in cells {
        match &c.result {
            Ok(r) => writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.pair.label(),
                c.update_period,
                r.te_bits,
                r.effective_te_bits,
                r.n_samples,
                r.k,
                r.l,
                r.n_bins
            )?,
            Err(_) => writeln!(
                w,
                "{},{},nan,nan,0,{},{},{}",
                c.pair.label(),
                c.update_period,
                settings.k,
                settings.l,
                settings.n_bins
            )?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: &[u32], bins: u32) -> SymbolSeries {
        SymbolSeries::new(v.to_vec(), bins).unwrap()
    }

    #[test]
    fn constant_series_is_all_zero() {
        let s = discretize(&[4.2; 30], 3, &QuantileBinning::default_for(3)).unwrap();
        assert!(s.symbols.iter().all(|&v| v == 0));
    }

    #[test]
    fn one_to_hundred_bins_five_ninety_five() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = discretize(&v, 3, &QuantileBinning::default_for(3)).unwrap();
        let counts = (0..3).map(|b| s.symbols.iter().filter(|&&x| x == b).count()).collect::<Vec<_>>();
        assert_eq!(counts, vec![5, 90, 5]);
    }

    #[test]
    fn type7_quantiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&v, 0.05) - 5.95).abs() < 1e-12);
        assert!((quantile_sorted(&v, 0.95) - 95.05).abs() < 1e-12);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 100.0);
    }

    #[test]
    fn discretize_rejects_bad_input() {
        let b = QuantileBinning::default_for(3);
        assert!(matches!(discretize(&[1.0], 3, &b), Err(Error::InsufficientData { .. })));
        assert!(discretize(&[1.0, 2.0], 1, &b).is_err());
        assert!(discretize(&[1.0, 2.0], 4, &b).is_err());
        assert!(discretize(&[1.0, f64::NAN], 3, &b).is_err());
    }

    #[test]
    fn te_errors() {
        let a = series(&[0, 1, 0, 1], 2);
        let b = series(&[0, 1, 0], 2);
        assert!(matches!(transfer_entropy(&a, &b, 1, 1), Err(Error::InvalidArgument(_))));
        let c = series(&[0, 1], 2);
        assert!(matches!(
            transfer_entropy(&c, &c, 1, 1),
            Err(Error::InsufficientData { needed: 3, got: 2 })
        ));
        assert!(SymbolSeries::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn self_predicting_target_gets_nothing_from_source() {
        let x = series(&[0, 1, 1, 0, 1, 0, 0, 1, 1, 0, 1, 0], 2);
        let y = series(&[1; 12], 2);
        assert_eq!(transfer_entropy(&x, &y, 1, 1).unwrap().te_bits, 0.0);
    }

    #[test]
    fn pooled_segments_do_not_cross_boundaries() {
        // copy process inside each segment; a naive concatenation would add a
        // spurious transition at the joint
        let x1 = series(&[0, 1, 1, 0], 2);
        let y1 = series(&[0, 0, 1, 1], 2);
        let pooled = transfer_entropy_pooled(&[(x1.clone(), y1.clone()), (x1, y1)], 1, 1).unwrap();
        assert_eq!(pooled.n_samples, 6);
    }
}
