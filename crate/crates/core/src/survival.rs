//! Survival statistics: Cox partial likelihood, concordance, cumulative /
//! dynamic AUC, Kaplan-Meier and the two-sample log-rank test.

use crate::error::{Error, Result};

/// Horizons for the reported dynamic AUC: 1, 3 and 5 years.
pub const AUC_HORIZONS_DAYS: [f64; 3] = [365.0, 1095.0, 1825.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalBatch {
    pub risks: Vec<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl SurvivalBatch {
    pub fn new(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        let n = risks.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty survival batch".into()));
        }
        if times.len() != n || events.len() != n {
            return Err(Error::Shape(format!(
                "risks/times/events lengths {}/{}/{}",
                n,
                times.len(),
                events.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidInput(format!("non-positive time {t}")));
        }
        if let Some(i) = risks.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("risk {i}"),
            });
        }
        Ok(Self {
            risks,
            times,
            events,
        })
    }

    pub fn len(&self) -> usize {
        self.risks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risks.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TieMethod {
    #[default]
    Breslow,
    Efron,
}

/// Negative log Cox partial likelihood, averaged over events.
pub fn cox_loss(batch: &SurvivalBatch) -> Result<f64> {
    cox_loss_and_grad(
        &batch.risks,
        &batch.times,
        &batch.events,
        TieMethod::Breslow,
    )
    .map(|(l, _)| l)
}

pub fn cox_loss_with_ties(batch: &SurvivalBatch, ties: TieMethod) -> Result<f64> {
    cox_loss_and_grad(&batch.risks, &batch.times, &batch.events, ties).map(|(l, _)| l)
}

/// Loss and its gradient with respect to each risk.
///
/// Risk sets are `{j : t_j >= t_i}` within the batch. Sums of `exp(h)` are
/// taken after subtracting `max(h)`.
pub fn cox_loss_and_grad(
    risks: &[f64],
    times: &[f64],
    events: &[bool],
    ties: TieMethod,
) -> Result<(f64, Vec<f64>)> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::Shape("cox: input lengths differ".into()));
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(Error::NoEvents);
    }
    let m = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = risks.iter().map(|h| (h - m).exp()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    // Groups of equal time, ascending.
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for k in 1..=n {
        if k == n || times[order[k]] != times[order[start]] {
            groups.push((start, k));
            start = k;
        }
    }
    // Risk-set sums, by suffix over groups.
    let mut risk_sum = vec![0.0; groups.len()];
    let mut acc = 0.0;
    for (g, &(s, t)) in groups.iter().enumerate().rev() {
        acc += order[s..t].iter().map(|&i| e[i]).sum::<f64>();
        risk_sum[g] = acc;
    }

    let mut loglik = 0.0;
    let mut prefix = 0.0;
    let mut grad = vec![0.0; n];
    for (g, &(s, t)) in groups.iter().enumerate() {
        let members = &order[s..t];
        let d = members.iter().filter(|&&i| events[i]).count();
        let mut tied_coef = 0.0;
        if d > 0 {
            let sr = risk_sum[g];
            loglik += members
                .iter()
                .filter(|&&i| events[i])
                .map(|&i| risks[i])
                .sum::<f64>();
            match ties {
                TieMethod::Breslow => {
                    loglik -= d as f64 * (m + sr.ln());
                    prefix += d as f64 / sr;
                }
                TieMethod::Efron => {
                    let sd: f64 = members.iter().filter(|&&i| events[i]).map(|&i| e[i]).sum();
                    for l in 0..d {
                        let frac = l as f64 / d as f64;
                        let denom = sr - frac * sd;
                        loglik -= m + denom.ln();
                        prefix += 1.0 / denom;
                        tied_coef += frac / denom;
                    }
                }
            }
        }
        for &i in members {
            let mut dl = e[i] * prefix;
            if events[i] {
                dl -= 1.0 + e[i] * tied_coef;
            }
            grad[i] = dl / n_events as f64;
        }
    }
    Ok((-loglik / n_events as f64, grad))
}

/// Harrell's concordance index.
///
/// A pair is comparable when `t_i < t_j` and subject `i` had an event; it
/// is concordant when `risk_i > risk_j` and counts one half on a risk tie.
pub fn c_index(batch: &SurvivalBatch) -> Result<f64> {
    let n = batch.len();
    // Fenwick tree over risk ranks of subjects with strictly later times.
    let mut sorted: Vec<f64> = batch.risks.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&v| v < r);
    let mut tree = vec![0u64; sorted.len() + 1];
    let add = |tree: &mut [u64], mut i: usize| {
        i += 1;
        while i < tree.len() {
            tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    };
    let prefix = |tree: &[u64], mut i: usize| -> u64 {
        // count of inserted ranks < i
        let mut s = 0;
        while i > 0 {
            s += tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| batch.times[b].total_cmp(&batch.times[a]));
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut inserted = 0u64;
    let mut k = 0;
    while k < n {
        let t = batch.times[order[k]];
        let mut end = k;
        while end < n && batch.times[order[end]] == t {
            end += 1;
        }
        for &i in &order[k..end] {
            if batch.events[i] {
                let r = rank(batch.risks[i]);
                let below = prefix(&tree, r);
                let up_to = prefix(&tree, r + 1);
                concordant += below;
                tied += up_to - below;
                comparable += inserted;
            }
        }
        for &i in &order[k..end] {
            add(&mut tree, rank(batch.risks[i]));
            inserted += 1;
        }
        k = end;
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok((2 * concordant + tied) as f64 / (2 * comparable) as f64)
}

/// Cumulative/dynamic AUC at `horizon` days, unweighted.
///
/// Cases had an event at or before the horizon, controls are still at
/// risk after it; subjects censored at or before the horizon are dropped.
pub fn dynamic_auc(batch: &SurvivalBatch, horizon: f64) -> Result<f64> {
    let mut controls: Vec<f64> = Vec::new();
    let mut cases: Vec<f64> = Vec::new();
    for i in 0..batch.len() {
        let t = batch.times[i];
        if t > horizon {
            controls.push(batch.risks[i]);
        } else if batch.events[i] {
            cases.push(batch.risks[i]);
        }
    }
    if cases.is_empty() {
        return Err(Error::EmptyAucSide {
            side: "cases",
            horizon,
        });
    }
    if controls.is_empty() {
        return Err(Error::EmptyAucSide {
            side: "controls",
            horizon,
        });
    }
    controls.sort_by(f64::total_cmp);
    let (mut above, mut tied) = (0u64, 0u64);
    for &r in &cases {
        let lo = controls.partition_point(|&c| c < r);
        let hi = controls.partition_point(|&c| c <= r);
        above += lo as u64;
        tied += (hi - lo) as u64;
    }
    let pairs = (cases.len() * controls.len()) as u64;
    Ok((2 * above + tied) as f64 / (2 * pairs) as f64)
}

/// Dynamic AUC at 1, 3 and 5 years plus their unweighted mean.
pub fn dynamic_auc_summary(batch: &SurvivalBatch) -> Result<([f64; 3], f64)> {
    let mut out = [0.0; 3];
    for (slot, &h) in out.iter_mut().zip(AUC_HORIZONS_DAYS.iter()) {
        *slot = dynamic_auc(batch, h)?;
    }
    let mean = out.iter().sum::<f64>() / 3.0;
    Ok((out, mean))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmPoint {
    pub time: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
    pub survival: f64,
}

/// Product-limit estimate. The first point is `(0, 1.0)`; then one point
/// per distinct observed time.
pub fn km_curve(times: &[f64], events: &[bool]) -> Result<Vec<KmPoint>> {
    if times.is_empty() {
        return Err(Error::InvalidInput("km_curve: no subjects".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Shape(
            "km_curve: times and events differ in length".into(),
        ));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = vec![KmPoint {
        time: 0.0,
        at_risk: times.len(),
        events: 0,
        censored: 0,
        survival: 1.0,
    }];
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut end = k;
        let mut d = 0;
        while end < order.len() && times[order[end]] == t {
            if events[order[end]] {
                d += 1;
            }
            end += 1;
        }
        let c = end - k - d;
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
        }
        out.push(KmPoint {
            time: t,
            at_risk,
            events: d,
            censored: c,
            survival: s,
        });
        at_risk -= end - k;
        k = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

/// Two-sample log-rank test; each group is `(times, events)`.
pub fn logrank_test(group_a: (&[f64], &[bool]), group_b: (&[f64], &[bool])) -> Result<LogRank> {
    let (ta, ea) = group_a;
    let (tb, eb) = group_b;
    if ta.is_empty() || tb.is_empty() {
        return Err(Error::InvalidInput("log-rank: empty group".into()));
    }
    if ta.len() != ea.len() || tb.len() != eb.len() {
        return Err(Error::Shape(
            "log-rank: times and events differ in length".into(),
        ));
    }
    let mut all: Vec<(f64, bool, bool)> = ta
        .iter()
        .zip(ea)
        .map(|(&t, &e)| (t, e, true))
        .chain(tb.iter().zip(eb).map(|(&t, &e)| (t, e, false)))
        .collect();
    if !all.iter().any(|x| x.1) {
        return Err(Error::NoEvents);
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut n_a = ta.len() as f64;
    let mut n_b = tb.len() as f64;
    let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
    let mut k = 0;
    while k < all.len() {
        let t = all[k].0;
        let (mut d_a, mut d, mut leave_a, mut leave_b) = (0.0, 0.0, 0.0, 0.0);
        while k < all.len() && all[k].0 == t {
            let (_, ev, in_a) = all[k];
            if ev {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            if in_a {
                leave_a += 1.0;
            } else {
                leave_b += 1.0;
            }
            k += 1;
        }
        if d > 0.0 {
            let n = n_a + n_b;
            obs += d_a;
            exp += d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
            }
        }
        n_a -= leave_a;
        n_b -= leave_b;
    }
    let statistic = if var > 0.0 {
        (obs - exp).powi(2) / var
    } else {
        0.0
    };
    Ok(LogRank {
        statistic,
        p_value: chi_square_sf(statistic, 1.0),
        observed_a: obs,
        expected_a: exp,
        variance: var,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskGroup {
    Low,
    High,
}

impl RiskGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::High => "high",
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Splits test risks at the training-set median; values equal to the
/// median go to the low group.
pub fn stratify_by_median(
    train_risks: &[f64],
    test_risks: &[f64],
) -> Result<(f64, Vec<RiskGroup>)> {
    let threshold = median(train_risks)
        .ok_or_else(|| Error::InvalidInput("stratify: no training risks".into()))?;
    let groups = test_risks
        .iter()
        .map(|&r| {
            if r > threshold {
                RiskGroup::High
            } else {
                RiskGroup::Low
            }
        })
        .collect();
    Ok((threshold, groups))
}

/// Survival function of the chi-square distribution, `Q(dof/2, x/2)`.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    upper_incomplete_gamma(0.5 * dof, 0.5 * x)
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn upper_incomplete_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series for P(a, x).
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..1000 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        1.0 - sum * log_prefix.exp()
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-17 {
                break;
            }
        }
        log_prefix.exp() * h
    }
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}
