"""Published full-scale results, kept as named targets for the ``full`` preset.

None of these are reachable at desk scale; they document what a complete run
(15 languages, 200K steps, 3 seeds x 4 checkpoints) is expected to approach.
Values are (macro WER, macro PER) unless noted.
"""

BASELINES = {"fst": (22.00, 4.92), "bilstm": (16.84, 3.99), "transformer": (17.51, 4.30)}

DEV_MULTILINGUAL = (14.83, 3.41)
DEV_SELF_TRAINED = (15.23, 3.48)
TEST_MULTILINGUAL = (14.99, 3.30)
TEST_SELF_TRAINED = (15.39, 3.37)
DEV_MONOLINGUAL = (27.22, 8.06)

# single checkpoints of one seed, keyed by step; the ensemble row is DEV_MULTILINGUAL
DEV_CHECKPOINTS = {50_000: (16.70, 3.93), 100_000: (16.04, 3.69), 150_000: (16.25, 3.78), 200_000: (15.73, 3.65)}

# corpus words translated vs selected at threshold 0.2
SILVER_COUNTS = {
    "arm": (9_947, 4_723),
    "bul": (9_999, 3_197),
    "dut": (2_275, 860),
    "fre": (9_985, 2_888),
    "geo": (5_038, 3_043),
    "gre": (9_949, 3_419),
    "hin": (1_450, 727),
    "hun": (10_000, 3_444),
    "ice": (9_839, 3_719),
    "kor": (4_282, 2_681),
    "lit": (7_033, 3_615),
    "rum": (9_785, 3_102),
}
SILVER_TOTAL = (89_582, 35_418)

DEV_MEAN_CONFIDENCE = 0.11
CORPUS_CONFIDENCE_RANGE = (0.12, 0.30)
