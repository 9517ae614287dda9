//! CSV emitters for the analysis and Monte Carlo commands.

use std::fmt::Write;

use bdmesh::experiment::MonteCarloSummary;
use bdmesh::probability::{min_probes, probability_curve, PortSpace, ProbabilityError, ProbePlan};

pub const TABLE_HEADER: &str = "seconds,probes,probability,failure";
pub const CURVE_HEADER: &str = "open_ports,probes,probability";
pub const SIMULATE_HEADER: &str = "trials,successes,empirical_rate,analytic_rate,delta";

/// Probabilities are always printed with this many decimals.
pub const DECIMALS: usize = 7;

fn prob(p: f64) -> String {
    format!("{p:.DECIMALS$}")
}

/// Parse `5,10,15` into numbers; an empty string is an empty list.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| format!("{x:?}: {e}")))
        .collect()
}

pub fn table_csv(space: PortSpace, open_ports: u32, rate: f64, durations: &[f64]) -> Result<String, ProbabilityError> {
    let mut out = format!("{TABLE_HEADER}\n");
    for &d in durations {
        let plan = ProbePlan::new(open_ports, rate, d)?;
        let p = plan.success_probability(space)?;
        writeln!(out, "{d},{},{},{}", plan.budget(), prob(p.value()), prob(p.complement())).unwrap();
    }
    if durations.is_empty() {
        // Still reject a bad open-port count.
        ProbePlan::new(open_ports, rate, 0.0)?.success_probability(space)?;
    }
    Ok(out)
}

/// The curve CSV plus one `probes to reach 0.99` summary line per B.
pub fn curve_csv(
    space: PortSpace,
    open_ports: &[u32],
    max_probes: u32,
    step: u32,
) -> Result<(String, Vec<String>), ProbabilityError> {
    let mut out = format!("{CURVE_HEADER}\n");
    for row in probability_curve(space, open_ports, max_probes, step)? {
        writeln!(out, "{},{},{}", row.open_ports, row.probes, prob(row.probability.value())).unwrap();
    }
    let summary = open_ports
        .iter()
        .map(|&b| min_probes(space, b, 0.99).map(|a| format!("open_ports={b} probes_to_0.99={a}")))
        .collect::<Result<_, _>>()?;
    Ok((out, summary))
}

pub fn simulate_csv(s: &MonteCarloSummary) -> String {
    format!(
        "{SIMULATE_HEADER}\n{},{},{},{},{}\n",
        s.trials,
        s.successes,
        prob(s.empirical_rate),
        prob(s.analytic_rate),
        prob(s.delta)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let csv = table_csv(PortSpace::default(), 256, 100.0, &[5.0, 10.0, 15.0, 20.0]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TABLE_HEADER);
        assert_eq!(lines[2], "10,1000,0.9818191,0.0181809");
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn empty_durations_give_header_only() {
        assert_eq!(table_csv(PortSpace::default(), 256, 100.0, &[]).unwrap(), format!("{TABLE_HEADER}\n"));
        assert!(table_csv(PortSpace::default(), 0, 100.0, &[]).is_ok());
        assert!(table_csv(PortSpace::default(), 70_000, 100.0, &[]).is_err());
    }

    #[test]
    fn curve_step_past_the_end() {
        let (csv, summary) = curve_csv(PortSpace::default(), &[256], 100, 500).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("\n256,0,0.0000000\n"));
        assert_eq!(summary, vec!["open_ports=256 probes_to_0.99=1148".to_string()]);
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<u32>("128, 256,512").unwrap(), vec![128, 256, 512]);
        assert!(parse_list::<u32>("").unwrap().is_empty());
        assert!(parse_list::<f64>("5,x").is_err());
    }

    #[test]
    fn simulate_row_format() {
        let s = MonteCarloSummary::from_counts(10, 9, 0.9818191);
        assert_eq!(simulate_csv(&s), format!("{SIMULATE_HEADER}\n10,9,0.9000000,0.9818191,-0.0818191\n"));
    }
}
