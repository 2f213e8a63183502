//! Token estimation, per-request receipts and the budget guard.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::prompt::PromptEnvelope;

/// Prices in USD per 1,000 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub in_per_1k: f64,
    pub out_per_1k: f64,
}

impl Rates {
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        prompt_tokens as f64 * self.in_per_1k / 1000.0
            + completion_tokens as f64 * self.out_per_1k / 1000.0
    }
}

/// `ceil(chars / 4)`, the fallback when a backend reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

pub fn estimate_prompt_tokens(envelope: &PromptEnvelope) -> u64 {
    envelope
        .messages
        .iter()
        .map(|m| estimate_tokens(&m.content))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReceipt {
    pub image_id: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub estimated_cost_usd: f64,
    pub backend_id: String,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error(
    "budget guard: projected spend {projected_usd:.6} USD on top of {committed_usd:.6} USD exceeds the {budget_usd:.6} USD cap"
)]
pub struct BudgetExceeded {
    pub projected_usd: f64,
    pub committed_usd: f64,
    pub budget_usd: f64,
}

/// Worst-case cost held against the budget while a request is in flight.
#[derive(Debug)]
#[must_use]
pub struct Reservation {
    amount: f64,
}

impl Reservation {
    pub fn amount(&self) -> f64 {
        self.amount
    }
}

#[derive(Debug, Default)]
struct Ledger {
    spent: f64,
    reserved: f64,
}

/// Single-writer cost meter. Every request reserves its worst-case cost
/// (estimated prompt tokens scaled by `prompt_margin`, plus the completion
/// cap) before it is sent; the reservation is replaced by the actual cost on
/// commit.
#[derive(Debug)]
pub struct CostMeter {
    rates: Rates,
    budget_usd: f64,
    max_completion_tokens: u64,
    prompt_margin: f64,
    ledger: Mutex<Ledger>,
}

impl CostMeter {
    pub fn new(rates: Rates, budget_usd: f64, max_completion_tokens: u64) -> Self {
        Self {
            rates,
            budget_usd,
            max_completion_tokens,
            prompt_margin: 1.0,
            ledger: Mutex::new(Ledger::default()),
        }
    }

    /// Scales the prompt-token estimate when projecting, to cover tokenizers
    /// that count more than `chars / 4`.
    pub fn with_prompt_margin(mut self, margin: f64) -> Self {
        self.prompt_margin = margin.max(1.0);
        self
    }

    /// Starts the meter with spend carried over from a checkpoint.
    pub fn with_spent(self, spent: f64) -> Self {
        self.ledger.lock().unwrap().spent = spent;
        self
    }

    pub(crate) fn add_spent(&self, amount: f64) {
        self.ledger.lock().unwrap().spent += amount;
    }

    pub fn rates(&self) -> Rates {
        self.rates
    }

    pub fn budget_usd(&self) -> f64 {
        self.budget_usd
    }

    pub fn max_completion_tokens(&self) -> u64 {
        self.max_completion_tokens
    }

    pub fn spent(&self) -> f64 {
        self.ledger.lock().unwrap().spent
    }

    pub fn projected_cost(&self, envelope: &PromptEnvelope) -> f64 {
        let prompt = (estimate_prompt_tokens(envelope) as f64 * self.prompt_margin).ceil() as u64;
        self.rates.cost(prompt, self.max_completion_tokens)
    }

    pub fn reserve(&self, envelope: &PromptEnvelope) -> Result<Reservation, BudgetExceeded> {
        let projected = self.projected_cost(envelope);
        let mut ledger = self.ledger.lock().unwrap();
        let committed = ledger.spent + ledger.reserved;
        if committed + projected > self.budget_usd {
            return Err(BudgetExceeded {
                projected_usd: projected,
                committed_usd: committed,
                budget_usd: self.budget_usd,
            });
        }
        ledger.reserved += projected;
        Ok(Reservation { amount: projected })
    }

    /// Releases the reservation and books the actual cost.
    pub fn commit(&self, reservation: Reservation, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        let cost = self.rates.cost(prompt_tokens, completion_tokens);
        let mut ledger = self.ledger.lock().unwrap();
        ledger.reserved = (ledger.reserved - reservation.amount).max(0.0);
        ledger.spent += cost;
        if cost > reservation.amount {
            log::warn!(
                "actual cost {cost:.6} exceeded the reserved {:.6}; raise prompt_margin",
                reservation.amount
            );
        }
        cost
    }

    pub fn release(&self, reservation: Reservation) {
        let mut ledger = self.ledger.lock().unwrap();
        ledger.reserved = (ledger.reserved - reservation.amount).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen_forge::prompt::build_prompt;

    const RATES: Rates = Rates {
        in_per_1k: 0.0015,
        out_per_1k: 0.002,
    };

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
        assert_eq!(estimate_tokens("éééé"), 1);
    }

    #[test]
    fn cost_matches_hand_arithmetic() {
        // 1200 prompt tokens at 0.0015/1k = 0.0018; 300 completion at 0.002/1k = 0.0006
        assert!((RATES.cost(1200, 300) - 0.0024).abs() < 1e-15);
        assert_eq!(RATES.cost(0, 0), 0.0);
    }

    #[test]
    fn guard_refuses_when_projection_exceeds_budget() {
        // system 40 chars -> 10 tokens, caption 8 chars -> 2 tokens
        let env = build_prompt(&"s".repeat(40), &"c".repeat(8), &[]);
        assert_eq!(estimate_prompt_tokens(&env), 12);
        // projected = 12 * 0.0015/1000 + 500 * 0.002/1000 = 0.000018 + 0.001 = 0.001018
        let hand = 12.0 * 0.0015 / 1000.0 + 500.0 * 0.002 / 1000.0;
        let meter = CostMeter::new(RATES, 0.002, 500);
        assert!((meter.projected_cost(&env) - hand).abs() < 1e-18);

        let first = meter.reserve(&env).unwrap();
        let err = meter.reserve(&env).unwrap_err();
        assert!(err.committed_usd + err.projected_usd > 0.002);

        let cost = meter.commit(first, 12, 100);
        assert!((cost - (12.0 * 0.0015 + 100.0 * 0.002) / 1000.0).abs() < 1e-18);
        // after the commit only the actual cost remains booked, so a second request fits
        let second = meter.reserve(&env).unwrap();
        meter.release(second);
        assert!((meter.spent() - cost).abs() < 1e-18);
    }

    #[test]
    fn margin_scales_prompt_projection() {
        let env = build_prompt(&"s".repeat(40), "", &[]);
        let meter = CostMeter::new(RATES, 1.0, 0).with_prompt_margin(1.5);
        assert!((meter.projected_cost(&env) - 15.0 * 0.0015 / 1000.0).abs() < 1e-18);
    }
}
