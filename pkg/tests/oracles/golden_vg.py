"""Frozen golden constants, generated by gen_golden_vg.py. Do not edit."""

# {name: [(psi_mm, theta, K_mm_day), ...]}
GOLDEN = {
    'loam': [
        (-75.0, 0.41492308888146384, 71.26785555558044),
        (-300.0, 0.3464362929380742, 9.054576861325788),
        (-1000.0, 0.24213178471815217, 0.3392382505760212),
        (-5000.0, 0.1474837140158437, 0.0017066402097075165),
        (-20000.0, 0.11008035475761557, 1.5545762123536647e-05),
    ],
    'loamy_sand': [
        (-50.0, 0.3569868406061782, 938.2601562136417),
        (-200.0, 0.16025834247179777, 7.8767242870974306),
        (-500.0, 0.09086392409069892, 0.08128448556737186),
        (-2000.0, 0.06279048951199569, 6.182479117332429e-05),
        (-10000.0, 0.05773822854902597, 1.4356029302956066e-08),
    ],
    'sand': [
        (-40.0, 0.382754427173172, 2809.3295329601588),
        (-150.0, 0.14195135763128103, 18.02167453746941),
        (-600.0, 0.05514480043800673, 0.004166236393878814),
        (-2500.0, 0.04592428358688555, 6.019372102431015e-07),
        (-15000.0, 0.045045554262752634, 9.017139489749293e-12),
    ],
}
