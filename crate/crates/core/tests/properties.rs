use proptest::prelude::*;

use rgrounding::calibrank::{ece, min_max_normalize, rank_topk, token_entropy, RankKey};
use rgrounding::metrics::{iou, recall_k_iou};

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (0.0..1000.0f64, 0.5..200.0f64).prop_map(|(s, len)| (s, s + len))
}

#[derive(Debug, Clone, PartialEq)]
struct Item {
    conf: f64,
    video: String,
    seg: usize,
    start: f64,
}

impl RankKey for Item {
    fn confidence(&self) -> f64 {
        self.conf
    }
    fn video_id(&self) -> &str {
        &self.video
    }
    fn segment_index(&self) -> usize {
        self.seg
    }
    fn start(&self) -> f64 {
        self.start
    }
}

fn item() -> impl Strategy<Value = Item> {
    (0u8..5, 0u8..3, 0usize..4, 0u8..4).prop_map(|(c, v, seg, s)| Item { conf: c as f64, video: format!("v{v}"), seg, start: s as f64 })
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in interval(), b in interval()) {
        let x = iou(a, b).unwrap();
        prop_assert_eq!(x, iou(b, a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(a, a).unwrap(), 1.0);
    }

    #[test]
    fn recall_monotone(
        truths in prop::collection::vec(interval(), 1..6),
        preds in prop::collection::vec(prop::collection::vec(interval(), 0..6), 6),
        k in 1usize..6,
        t in 0.0..0.95f64,
    ) {
        let truths: Vec<Option<(f64, f64)>> = truths.into_iter().map(Some).collect();
        let ranked: Vec<Vec<(f64, f64)>> = preds.into_iter().take(truths.len()).collect();
        let r = |k, t| recall_k_iou(&ranked, &truths, k, t).unwrap();
        prop_assert!(r(k, t) <= r(k + 1, t));
        prop_assert!(r(k, t + 0.05) <= r(k, t));
        prop_assert!((0.0..=1.0).contains(&r(k, t)));
    }

    #[test]
    fn ece_bounded(scored in prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..50), bins in 1usize..20) {
        let r = ece(&scored, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.ece));
        prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), scored.len());
    }

    #[test]
    fn entropy_bounded(w in prop::collection::vec(0.0..1.0f64, 1..30)) {
        let total: f64 = w.iter().sum();
        prop_assume!(total > 1e-6);
        let p: Vec<f64> = w.iter().map(|x| x / total).collect();
        let h = token_entropy(&p).unwrap();
        prop_assert!(h >= -1e-12 && h <= (p.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn normalized_in_unit_range(v in prop::collection::vec(-1e3..1e3f64, 1..30)) {
        for x in min_max_normalize(&v) {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn topk_ignores_input_order(items in prop::collection::vec(item(), 0..12), k in 0usize..14, seed in any::<u64>()) {
        let mut shuffled = items.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            let j = (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize;
            shuffled.swap(i, j);
        }
        prop_assert_eq!(rank_topk(items, k), rank_topk(shuffled, k));
    }
}
