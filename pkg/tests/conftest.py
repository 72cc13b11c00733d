import gzip
import textwrap

import pytest

# hand-built three-record GenBank flat file; accessions and sequences are
# the reference triples the parser tests assert against
FIXTURE_GBFF = textwrap.dedent("""\
    LOCUS       NM_TEST1                 4 bp    mRNA    linear   PRI 01-JAN-2024
    DEFINITION  Test mammal transcript.
    ACCESSION   NM_TEST1
    VERSION     NM_TEST1.1
    SOURCE      Homo sapiens (human)
      ORGANISM  Homo sapiens
                Eukaryota; Metazoa; Chordata; Craniata; Vertebrata; Euteleostomi;
                Mammalia; Primates; Haplorrhini; Catarrhini; Hominidae; Homo.
    REFERENCE   1  (bases 1 to 4)
      AUTHORS   Doe,J.
      TITLE     Direct Submission
      JOURNAL   Unpublished
    FEATURES             Location/Qualifiers
         source          1..4
                         /organism="Homo sapiens"
                         /mol_type="mRNA"
    ORIGIN
            1 atgc
    //
    LOCUS       NM_TEST2                 4 bp    mRNA    linear   VRT 01-JAN-2024
    DEFINITION  Test fish transcript with RNA letters.
    ACCESSION   NM_TEST2
    SOURCE      Danio rerio (zebrafish)
      ORGANISM  Danio rerio
                Eukaryota; Metazoa; Chordata; Craniata; Vertebrata; Euteleostomi;
                Actinopterygii; Neopterygii; Teleostei; Danio.
    ORIGIN
            1 augc
    //
    LOCUS       NM_TEST3                 4 bp    mRNA    linear   INV 01-JAN-2024
    DEFINITION  Test invertebrate transcript with an ambiguous base.
    ACCESSION   NM_TEST3
    SOURCE      Drosophila melanogaster (fruit fly)
      ORGANISM  Drosophila melanogaster
                Eukaryota; Metazoa; Ecdysozoa; Arthropoda; Hexapoda; Insecta;
                Drosophila.
    ORIGIN
            1 atgn
    //
    """)

FIXTURE_TRIPLES = [
    ("NM_TEST1", "ATGC"),
    ("NM_TEST2", "AUGC"),
    ("NM_TEST3", "ATGN"),
]


@pytest.fixture
def gbff_path(tmp_path):
    path = tmp_path / "fixture.gbff"
    path.write_text(FIXTURE_GBFF)
    return path


@pytest.fixture
def gbff_gz_path(tmp_path):
    path = tmp_path / "fixture.gbff.gz"
    path.write_bytes(gzip.compress(FIXTURE_GBFF.encode("ascii")))
    return path
