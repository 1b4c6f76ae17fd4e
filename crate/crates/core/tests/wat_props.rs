use std::io::Write;

use crawlcurate_core::wat::{dedup_pairs, extract_pairs, parse_wat_stream, CandidatePair, Compression, ImgTagEntry, WatRecord};
use flate2::write::GzEncoder;
use proptest::prelude::*;
use url::Url;

fn entry() -> impl Strategy<Value = ImgTagEntry> {
    (
        prop_oneof!["[a-z0-9/._-]{1,20}", "https?://[a-z]{1,6}\\.com/[a-z0-9]{0,8}\\.jpg", "\\PC{1,12}"],
        prop::option::of(prop_oneof!["\\PC{0,30}", "[ \t]{0,4}", "[a-z &;#0-9]{0,20}"]),
    )
        .prop_map(|(src, alt)| ImgTagEntry { src, alt })
}

fn record() -> impl Strategy<Value = WatRecord> {
    ("[a-z]{1,8}", "[a-z0-9/]{0,12}", prop::collection::vec(entry(), 0..8)).prop_map(|(host, path, imgs)| WatRecord {
        target_uri: Url::parse(&format!("http://{host}.example/{path}")).unwrap(),
        imgs: imgs.into_iter().filter(|i| !i.src.is_empty()).collect(),
        record_offset: 0,
    })
}

fn serialize(records: &[WatRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn roundtrip_preserves_records(records in prop::collection::vec(record(), 0..12)) {
        let text = serialize(&records);
        let mut reader = parse_wat_stream(text.as_bytes(), Compression::None);
        let parsed: Vec<WatRecord> = reader.by_ref().map(Result::unwrap).collect();
        prop_assert_eq!(reader.skipped(), 0);
        prop_assert_eq!(parsed.len(), records.len());
        let mut offset = 0u64;
        for (p, r) in parsed.iter().zip(&records) {
            prop_assert_eq!(&p.target_uri, &r.target_uri);
            prop_assert_eq!(&p.imgs, &r.imgs);
            prop_assert_eq!(p.record_offset, offset);
            offset += r.to_line().len() as u64 + 1;
        }
    }

    #[test]
    fn gzip_members_roundtrip(records in prop::collection::vec(record(), 1..8), split in 0usize..8) {
        let split = split.min(records.len());
        let mut bytes = Vec::new();
        for part in [&records[..split], &records[split..]] {
            let mut gz = GzEncoder::new(Vec::new(), flate2::Compression::fast());
            gz.write_all(serialize(part).as_bytes()).unwrap();
            bytes.extend(gz.finish().unwrap());
        }
        let parsed: Vec<WatRecord> = parse_wat_stream(&bytes[..], Compression::Gzip).map(Result::unwrap).collect();
        prop_assert_eq!(parsed.len(), records.len());
    }

    #[test]
    fn emitted_pairs_are_absolute_with_text(r in record()) {
        let ex = extract_pairs(&r);
        prop_assert_eq!(ex.pairs.len() as u64 + ex.dropped_no_alt + ex.dropped_unresolvable, r.imgs.len() as u64);
        for p in &ex.pairs {
            prop_assert!(matches!(p.image_url.scheme(), "http" | "https"));
            prop_assert!(p.image_url.host_str().is_some());
            prop_assert!(p.image_url.fragment().is_none());
            prop_assert!(!p.text.trim().is_empty());
            prop_assert_eq!(p.text.trim(), p.text.as_str());
        }
    }

    #[test]
    fn skipped_plus_emitted_is_total(
        lines in prop::collection::vec(prop_oneof![record().prop_map(|r| r.to_line()), "\\PC{1,30}", Just("{\"uri\":\"x\"}".to_string())], 0..20)
    ) {
        let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
        let mut reader = parse_wat_stream(text.as_bytes(), Compression::None);
        let n = reader.by_ref().filter(|r| r.is_ok()).count() as u64;
        prop_assert_eq!(n, reader.emitted());
        let non_blank = lines.iter().filter(|l| !l.trim().is_empty()).count() as u64;
        prop_assert_eq!(reader.skipped() + reader.emitted(), non_blank);
    }

    #[test]
    fn dedup_is_idempotent_and_keeps_first(keys in prop::collection::vec((0u8..5, 0u8..3), 0..40)) {
        let pairs: Vec<CandidatePair> = keys
            .iter()
            .map(|(u, t)| CandidatePair {
                image_url: Url::parse(&format!("http://h.com/{u}.jpg")).unwrap(),
                text: format!("t{t}"),
                page_url: Url::parse(&format!("http://p.com/{}", keys.len())).unwrap(),
            })
            .collect();
        let once: Vec<_> = dedup_pairs(pairs.clone()).collect();
        let twice: Vec<_> = dedup_pairs(once.clone()).collect();
        prop_assert_eq!(&once, &twice);
        let mut seen = std::collections::HashSet::new();
        let oracle: Vec<_> = pairs.into_iter().filter(|p| seen.insert((p.image_url.clone(), p.text.clone()))).collect();
        prop_assert_eq!(once, oracle);
    }
}

#[test]
fn malformed_middle_record_is_skipped() {
    let text = concat!(
        r#"{"uri":"http://a.com/","imgs":[]}"#, "\n",
        r#"{"uri":"http://b.com/","imgs":[{"src":"x"#, "\n",
        r#"{"uri":"http://c.com/","imgs":[]}"#, "\n",
    );
    let mut reader = parse_wat_stream(text.as_bytes(), Compression::None);
    assert_eq!(reader.by_ref().filter(|r| r.is_ok()).count(), 2);
    assert_eq!(reader.skipped(), 1);
    let mut empty = parse_wat_stream(&b""[..], Compression::None);
    assert!(empty.next().is_none());
}
