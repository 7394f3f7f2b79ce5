/// Feasible iff `cost[a] + floor_rest <= remaining`; action 0 (coarsest) is always allowed.
///
/// `remaining` is the budget left before this block, `floor_rest` the cost of every later block at
/// the coarsest step.
pub fn mask_actions(remaining: f64, costs: &[f64], floor_rest: f64) -> Vec<bool> {
    costs
        .iter()
        .enumerate()
        .map(|(a, &c)| a == 0 || c + floor_rest <= remaining)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let costs = [10.0, 20.0, 30.0, 40.0, 50.0];
        assert_eq!(mask_actions(1e12, &costs, 0.0), vec![true; 5]);
        assert_eq!(mask_actions(0.0, &costs, 0.0), vec![true, false, false, false, false]);
        assert_eq!(mask_actions(35.0, &costs, 0.0), vec![true, true, true, false, false]);
        assert_eq!(mask_actions(35.0, &costs, 5.0), vec![true, true, true, false, false]);
        assert_eq!(mask_actions(35.0, &costs, 5.1), vec![true, true, false, false, false]);
        assert_eq!(mask_actions(-10.0, &costs, 0.0), vec![true, false, false, false, false]);
    }
}
