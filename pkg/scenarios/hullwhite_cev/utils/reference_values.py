"""Published prices and implied volatilities for the simulated CEV / Hull-White market.

Keys are (maturity_days, strike); values are (price, implied_vol).
"""

GENERATING = {
    (60, 85): (11.3666, 0.4941),
    (60, 92): (7.5389, 0.4921),
    (60, 99): (4.7538, 0.4906),
    (60, 106): (2.8616, 0.4893),
    (60, 113): (1.6523, 0.4884),
    (60, 120): (0.9189, 0.4875),
    (120, 85): (14.2787, 0.4923),
    (120, 92): (10.7017, 0.4905),
    (120, 99): (7.8563, 0.4886),
    (120, 106): (5.6560, 0.4866),
    (120, 113): (3.9917, 0.4840),
    (120, 120): (2.7493, 0.4802),
}

CALIBRATED_GOOD_REFERENCE = {
    (60, 85): (11.3666, 0.4941),
    (60, 92): (7.5398, 0.4922),
    (60, 99): (4.7549, 0.4906),
    (60, 106): (2.8625, 0.4894),
    (60, 113): (1.6532, 0.4885),
    (60, 120): (0.9192, 0.4876),
    (120, 85): (14.2787, 0.4923),
    (120, 92): (10.7007, 0.4904),
    (120, 99): (7.8580, 0.4887),
    (120, 106): (5.6575, 0.4866),
    (120, 113): (3.9918, 0.4840),
    (120, 120): (2.7495, 0.4802),
}

CALIBRATED_BAD_REFERENCE = {
    (60, 85): (11.3668, 0.4941),
    (60, 92): (7.5396, 0.4922),
    (60, 99): (4.7537, 0.4905),
    (60, 106): (2.8613, 0.4893),
    (60, 113): (1.6526, 0.4884),
    (60, 120): (0.9192, 0.4876),
    (120, 85): (14.2780, 0.4923),
    (120, 92): (10.7009, 0.4904),
    (120, 99): (7.8575, 0.4886),
    (120, 106): (5.6568, 0.4866),
    (120, 113): (3.9910, 0.4840),
    (120, 120): (2.7483, 0.4802),
}

# Published figures are rounded to four decimals.
PRICE_ROUNDING = 5e-5
IV_ROUNDING = 5e-5
