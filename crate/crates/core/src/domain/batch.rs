use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Constraints, DomainError, EmailAddress, Variables};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipientEntry {
    pub address: EmailAddress,
    #[serde(default)]
    pub variables: Variables,
}

impl RecipientEntry {
    pub fn new(address: EmailAddress) -> Self {
        RecipientEntry { address, variables: Variables::new() }
    }

    pub fn with_var(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.variables.insert(name.into(), value.into());
        self
    }
}

/// One queue message worth of recipients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub campaign_id: String,
    pub batch_seq: u32,
    pub recipients: Vec<RecipientEntry>,
    pub is_final: bool,
    pub template_id: String,
}

/// Removes repeated addresses, keeping the first occurrence. Returns the
/// surviving entries in input order and the number removed.
pub fn dedupe_recipients(raw: Vec<RecipientEntry>) -> (Vec<RecipientEntry>, usize) {
    let mut seen: HashSet<EmailAddress> = HashSet::with_capacity(raw.len());
    let total = raw.len();
    let kept: Vec<RecipientEntry> = raw.into_iter().filter(|r| seen.insert(r.address.clone())).collect();
    let removed = total - kept.len();
    (kept, removed)
}

/// Splits `recipients` into consecutive batches of `max_batch_size`, the last
/// one possibly shorter and flagged final.
pub fn plan_batches(
    campaign_id: &str,
    template_id: &str,
    recipients: &[RecipientEntry],
    constraints: &Constraints,
) -> Result<Vec<Batch>, DomainError> {
    if recipients.is_empty() {
        return Err(DomainError::EmptyCampaign);
    }
    let size = constraints.max_batch_size as usize;
    let count = recipients.len().div_ceil(size);
    Ok(recipients
        .chunks(size)
        .enumerate()
        .map(|(seq, chunk)| Batch {
            campaign_id: campaign_id.to_owned(),
            batch_seq: seq as u32,
            recipients: chunk.to_vec(),
            is_final: seq + 1 == count,
            template_id: template_id.to_owned(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_address;
    use proptest::prelude::*;

    fn entries(n: usize) -> Vec<RecipientEntry> {
        (0..n).map(|i| RecipientEntry::new(validate_address(&format!("u{i}@example.com")).unwrap())).collect()
    }

    fn sizes(n: usize) -> Vec<usize> {
        plan_batches("c", "t", &entries(n), &Constraints::default())
            .unwrap()
            .iter()
            .map(|b| b.recipients.len())
            .collect()
    }

    #[test]
    fn boundary_fifty() {
        let b = plan_batches("c", "t", &entries(50), &Constraints::default()).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b[0].is_final);
        assert_eq!(b[0].recipients.len(), 50);
    }

    #[test]
    fn ceiling_arithmetic() {
        assert_eq!(sizes(101), vec![50, 50, 1]);
        let b = plan_batches("c", "t", &entries(101), &Constraints::default()).unwrap();
        assert_eq!(b.iter().map(|b| b.is_final).collect::<Vec<_>>(), vec![false, false, true]);
    }

    #[test]
    fn thousand_is_twenty() {
        let b = plan_batches("c", "t", &entries(1000), &Constraints::default()).unwrap();
        assert_eq!(b.len(), 20);
        assert_eq!(b.iter().map(|b| b.batch_seq).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn empty_campaign() {
        assert_eq!(plan_batches("c", "t", &[], &Constraints::default()), Err(DomainError::EmptyCampaign));
    }

    #[test]
    fn dedupe_keeps_first_occurrence() {
        let a = RecipientEntry::new(validate_address("a@x.com").unwrap()).with_var("n", "1");
        let a2 = RecipientEntry::new(validate_address("a@X.COM").unwrap()).with_var("n", "2");
        let b = RecipientEntry::new(validate_address("b@x.com").unwrap());
        let (kept, removed) = dedupe_recipients(vec![a.clone(), b.clone(), a2]);
        assert_eq!(kept, vec![a, b]);
        assert_eq!(removed, 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn partition_and_single_final(n in 1usize..5_000, batch in 1u32..=50) {
            let c = Constraints { max_batch_size: batch, ..Constraints::default() };
            let input = entries(n);
            let batches = plan_batches("c", "t", &input, &c).unwrap();
            prop_assert_eq!(batches.len(), n.div_ceil(batch as usize));
            let flat: Vec<_> = batches.iter().flat_map(|b| b.recipients.iter().cloned()).collect();
            prop_assert_eq!(&flat, &input);
            let finals: Vec<_> = batches.iter().filter(|b| b.is_final).collect();
            prop_assert_eq!(finals.len(), 1);
            prop_assert_eq!(finals[0].batch_seq as usize, batches.len() - 1);
            for (i, b) in batches.iter().enumerate() {
                prop_assert_eq!(b.batch_seq as usize, i);
                prop_assert!(b.recipients.len() <= batch as usize);
                if i + 1 < batches.len() {
                    prop_assert_eq!(b.recipients.len(), batch as usize);
                }
            }
        }

        #[test]
        fn dedupe_conserves_count(idx in proptest::collection::vec(0usize..40, 0..200)) {
            let raw: Vec<_> = idx
                .iter()
                .map(|i| RecipientEntry::new(validate_address(&format!("u{i}@example.com")).unwrap()))
                .collect();
            let total = raw.len();
            let (kept, removed) = dedupe_recipients(raw);
            prop_assert_eq!(kept.len() + removed, total);
            let unique: HashSet<_> = kept.iter().map(|r| r.address.clone()).collect();
            prop_assert_eq!(unique.len(), kept.len());
        }
    }
}
