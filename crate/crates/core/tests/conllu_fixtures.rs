use std::collections::BTreeSet;
use std::path::PathBuf;

use morphprobe_core::conllu::{build_vocabulary, parse_conllu, Split};
use morphprobe_core::labels::{build_label_space, FeatureLabel};

fn fixture(name: &str) -> String {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", name].iter().collect();
    std::fs::read_to_string(path).unwrap()
}

/// Straight row-by-row reading of a CoNLL-U file, independent of the parser:
/// returns, per probe token, the surface form and the union of UPOS/FEATS
/// label strings over its source rows.
fn naive_tokens(text: &str) -> Vec<Vec<(String, BTreeSet<String>)>> {
    let mut sentences = Vec::new();
    let mut current: Vec<(String, BTreeSet<String>)> = Vec::new();
    let mut pending_components = 0usize;
    for line in text.lines() {
        if line.is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let id = cols[0];
        if id.contains('.') {
            continue;
        }
        let mut labels = BTreeSet::new();
        if cols[3] != "_" {
            labels.insert(cols[3].to_string());
        }
        if cols[5] != "_" {
            for f in cols[5].split('|') {
                let (n, vs) = f.split_once('=').unwrap();
                for v in vs.split(',') {
                    labels.insert(format!("{n}={v}"));
                }
            }
        }
        if let Some((a, b)) = id.split_once('-') {
            let (a, b): (usize, usize) = (a.parse().unwrap(), b.parse().unwrap());
            pending_components = b - a + 1;
            current.push((cols[1].to_string(), BTreeSet::new()));
        } else if pending_components > 0 {
            pending_components -= 1;
            current.last_mut().unwrap().1.extend(labels);
        } else {
            current.push((cols[1].to_string(), labels));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

fn row_counts(text: &str) -> (usize, usize, usize) {
    let (mut total, mut components, mut empty) = (0, 0, 0);
    let mut pending = 0usize;
    for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        total += 1;
        let id = line.split('\t').next().unwrap();
        if id.contains('.') {
            empty += 1;
        } else if let Some((a, b)) = id.split_once('-') {
            pending = b.parse::<usize>().unwrap() - a.parse::<usize>().unwrap() + 1;
        } else if pending > 0 {
            pending -= 1;
            components += 1;
        }
    }
    (total, components, empty)
}

const ALL_FIXTURES: [&str; 8] = [
    "mini.conllu",
    "he/train.conllu",
    "he/dev.conllu",
    "he/test.conllu",
    "es/train.conllu",
    "es/dev.conllu",
    "es/test.conllu",
    "sl/test.conllu",
];

#[test]
fn mini_token_count_matches_hand_count() {
    let text = fixture("mini.conllu");
    let corpus = parse_conllu(&text, "mini", Split::Train).unwrap();
    // rows: 4 + 8 + 3 = 15; MWT components: 2 + 2; empty nodes: 1
    assert_eq!(row_counts(&text), (15, 4, 1));
    assert_eq!(corpus.token_count(), 15 - 4 - 1);
    let lens: Vec<usize> = corpus.sentences.iter().map(|s| s.tokens.len()).collect();
    assert_eq!(lens, vec![2, 5, 3]);
}

#[test]
fn flattened_counts_hold_on_every_fixture() {
    for name in ALL_FIXTURES {
        let text = fixture(name);
        let corpus = parse_conllu(&text, "xx", Split::Test).unwrap();
        let (total, components, empty) = row_counts(&text);
        assert_eq!(corpus.token_count(), total - components - empty, "{name}");
    }
}

#[test]
fn token_labels_equal_union_of_source_rows() {
    for name in ALL_FIXTURES {
        let text = fixture(name);
        let corpus = parse_conllu(&text, "xx", Split::Test).unwrap();
        let naive = naive_tokens(&text);
        assert_eq!(corpus.sentences.len(), naive.len(), "{name}");
        for (sent, expect) in corpus.sentences.iter().zip(&naive) {
            assert_eq!(sent.tokens.len(), expect.len());
            for (tok, (form, labels)) in sent.tokens.iter().zip(expect) {
                assert_eq!(&tok.surface_form, form);
                let mut got: BTreeSet<String> = tok.upos_set.iter().cloned().collect();
                got.extend(tok.feats.iter().map(|(n, v)| format!("{n}={v}")));
                assert_eq!(&got, labels, "{name}: {form}");
                assert!(!tok.upos_set.is_empty());
                if !tok.is_mwt {
                    assert_eq!(tok.upos_set.len(), 1);
                    assert!(tok.component_upos.is_empty());
                }
            }
        }
    }
}

#[test]
fn mini_vocabulary_hand_count() {
    let corpus = parse_conllu(&fixture("mini.conllu"), "mini", Split::Train).unwrap();
    let vocab = build_vocabulary(&[&corpus]).unwrap();
    let expect = ["hasefer", "gadol", "Ellos", "comieron", "del", "pan", ".", "duermen"];
    assert_eq!(vocab.len(), expect.len());
    for w in expect {
        assert!(vocab.contains(w), "{w}");
    }
    assert!(!vocab.contains("ellos"));
}

#[test]
fn mini_label_set_hand_enumeration() {
    let corpus = parse_conllu(&fixture("mini.conllu"), "mini", Split::Train).unwrap();
    let space = build_label_space(&[&corpus], 1, None).unwrap();
    let rendered: Vec<String> = space.labels().iter().map(FeatureLabel::render).collect();
    let expect = [
        "ADJ", "ADP", "Case=Nom", "DET", "Definite=Def", "Gender=Fem", "Gender=Masc", "Mood=Ind",
        "NOUN", "Number=Plur", "Number=Sing", "PRON", "PUNCT", "Person=3", "PronType=Art",
        "PronType=Prs", "Tense=Past", "Tense=Pres", "VERB", "VerbForm=Fin",
    ];
    assert_eq!(rendered, expect);
}

#[test]
fn mini_specific_tokens() {
    let corpus = parse_conllu(&fixture("mini.conllu"), "mini", Split::Train).unwrap();
    let del = &corpus.sentences[1].tokens[2];
    assert_eq!(del.surface_form, "del");
    assert!(del.is_mwt);
    assert_eq!(del.component_upos, vec!["ADP", "DET"]);
    assert_eq!(del.deprel.as_deref(), Some("case"));
    assert_eq!(del.head_index, Some(4));
    let ellos = &corpus.sentences[1].tokens[0];
    assert!(ellos.has_feat("Gender", "Fem") && ellos.has_feat("Gender", "Masc"));
    assert_eq!(ellos.feats.len(), 6);
}

#[test]
fn reparse_is_stable_on_fixtures() {
    for name in ALL_FIXTURES {
        let first = parse_conllu(&fixture(name), "xx", Split::Dev).unwrap();
        let serialized = first.to_conllu();
        let second = parse_conllu(&serialized, "xx", Split::Dev).unwrap();
        assert_eq!(first, second, "{name}");
        assert_eq!(serialized, second.to_conllu(), "{name}");
    }
}

#[test]
fn parsing_is_deterministic() {
    let text = fixture("he/train.conllu");
    let a = parse_conllu(&text, "he", Split::Train).unwrap();
    let b = parse_conllu(&text, "he", Split::Train).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.sentences.len(), 24);
}
