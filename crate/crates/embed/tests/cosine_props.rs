use proptest::prelude::*;
use umami_embed::{cosine, Embedder, OfflineHashEmbedder};

proptest! {
    #[test]
    fn cosine_is_symmetric_and_bounded(a in "[a-z甜酸苦辣咸 ]{1,40}", b in "[a-z甜酸苦辣咸 ]{1,40}") {
        let embedder = OfflineHashEmbedder::with_defaults();
        let ea = embedder.embed(&a).unwrap();
        let eb = embedder.embed(&b).unwrap();
        let ab = cosine(&ea, &eb).unwrap();
        let ba = cosine(&eb, &ea).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab.abs() <= 1.0 + 1e-12);
        prop_assert!((cosine(&ea, &ea).unwrap() - 1.0).abs() <= 1e-12);
    }
}
