#![allow(clippy::excessive_precision, clippy::approx_constant)]

// Reference values computed with 40-digit arbitrary-precision arithmetic.

/// (x, erf(x)) on [-6, 6].
pub const ERF_REFERENCE: &[(f64, f64)] = &[
    (-6.0, -0.99999999999999997848),
    (-5.75, -0.99999999999999957679),
    (-5.5, -0.99999999999999264215),
    (-5.25, -0.99999999999988689687),
    (-5.0, -0.99999999999846254021),
    (-4.75, -0.99999999998151495228),
    (-4.5, -0.99999999980338395585),
    (-4.25, -0.99999999814942586261),
    (-4.0, -0.99999998458274209972),
    (-3.75, -0.9999998862727434302),
    (-3.5, -0.99999925690162765859),
    (-3.25, -0.99999569722053632488),
    (-3.0, -0.99997790950300141456),
    (-2.75, -0.99989937807788036316),
    (-2.5, -0.99959304798255504106),
    (-2.25, -0.9985372834133188483),
    (-2.0, -0.99532226501895273416),
    (-1.75, -0.98667167121918244377),
    (-1.5, -0.96610514647531072707),
    (-1.25, -0.92290012825645823014),
    (-1.0, -0.84270079294971486934),
    (-0.75, -0.7111556336535151316),
    (-0.5, -0.52049987781304653768),
    (-0.25, -0.27632639016823693299),
    (0.0, 0.0),
    (0.25, 0.27632639016823693299),
    (0.5, 0.52049987781304653768),
    (0.75, 0.7111556336535151316),
    (1.0, 0.84270079294971486934),
    (1.25, 0.92290012825645823014),
    (1.5, 0.96610514647531072707),
    (1.75, 0.98667167121918244377),
    (2.0, 0.99532226501895273416),
    (2.25, 0.9985372834133188483),
    (2.5, 0.99959304798255504106),
    (2.75, 0.99989937807788036316),
    (3.0, 0.99997790950300141456),
    (3.25, 0.99999569722053632488),
    (3.5, 0.99999925690162765859),
    (3.75, 0.9999998862727434302),
    (4.0, 0.99999998458274209972),
    (4.25, 0.99999999814942586261),
    (4.5, 0.99999999980338395585),
    (4.75, 0.99999999998151495228),
    (5.0, 0.99999999999846254021),
    (5.25, 0.99999999999988689687),
    (5.5, 0.99999999999999264215),
    (5.75, 0.99999999999999957679),
    (6.0, 0.99999999999999997848),
];

/// (z, ln erfc(z)) on [-6, 40].
pub const LN_ERFC_REFERENCE: &[(f64, f64)] = &[
    (-6.0, 0.6931471805599452986574),
    (-5.5, 0.6931471805599416304933),
    (-5.0, 0.69314718055917657952),
    (-4.5, 0.6931471804616372873353),
    (-4.0, 0.6931471728513163295657),
    (-3.5, 0.6931468090106901142949),
    (-3.0, 0.693136135250446810323),
    (-2.5, 0.6929436838471712009783),
    (-2.0, 0.6908055736465876567632),
    (-1.5, 0.6760545027339605639664),
    (-1.0, 0.6112323176780704946427),
    (-0.5, 0.4190391477755595803634),
    (0.0, 0.0),
    (0.5, -0.7350111298370844030259),
    (1.0, -1.849605509933248248576),
    (1.5, -3.384492089551552720323),
    (2.0, -5.364941264616637574468),
    (2.5, -7.806815272727264358884),
    (3.0, -10.72036304198111256773),
    (3.5, -14.11243740214817375525),
    (4.0, -17.987778312103006503),
    (4.5, -22.349768303435940757),
    (5.0, -27.20088954553743442244),
    (5.5, -32.54300890737696243621),
    (6.0, -38.37756117322338836602),
    (6.5, -44.7056701895331153082),
    (7.0, -51.52823109371015292494),
    (7.5, -58.8459674738723148092),
    (8.0, -66.65947197080516148975),
    (8.5, -74.96923568857264576556),
    (9.0, -83.77566987952908333386),
    (9.5, -93.07912219224849376033),
    (10.0, -102.8798890248448885748),
    (10.5, -113.1782250431495916703),
    (11.0, -123.9743506042268452901),
    (11.5, -135.2684576111317861612),
    (12.0, -147.0607141779870094858),
    (12.5, -159.3512683823823308492),
    (13.0, -172.1402513100947650311),
    (13.5, -185.4277795456293228787),
    (14.0, -199.21395722478285921),
    (14.5, -213.4988777380967536518),
    (15.0, -228.2826251538063861356),
    (15.5, -243.565275413727291996),
    (16.0, -259.3468973440503046718),
    (16.5, -275.6275535142690288706),
    (17.0, -292.4073009707309252715),
    (17.5, -309.6861918660813928594),
    (18.0, -327.4642740017889509192),
    (18.5, -345.7415912977269226341),
    (19.0, -364.5181842002409034323),
    (19.5, -383.7940900381005038044),
    (20.0, -403.569343334104234963),
    (20.5, -423.843976078791158181),
    (21.0, -444.6180179716455762551),
    (21.5, -465.8914966343103627456),
    (22.0, -487.6644377996107377414),
    (22.5, -509.9368654796023637612),
    (23.0, -532.7088021153711733625),
    (23.5, -555.9802687109080995359),
    (24.0, -579.751284953044576956),
    (24.5, -604.0218693191521203331),
    (25.0, -628.7920391740716853687),
    (25.5, -654.0618108575379988176),
    (26.0, -679.8311997631942302624),
    (26.5, -706.100220410148086605),
    (27.0, -732.8688865078974109764),
    (27.5, -760.137211015348194628),
    (28.0, -787.9052061945577122836),
    (28.5, -816.1728836597579144808),
    (29.0, -844.9402544221473043107),
    (29.5, -874.2073289308816691656),
    (30.0, -903.9741171106438780796),
    (30.5, -934.2406283961293601421),
    (31.0, -965.0068717637458992087),
    (31.5, -996.2728557607932148651),
    (32.0, -1028.038588532358773948),
    (32.5, -1060.304077846140819089),
    (33.0, -1093.069331115387225251),
    (33.5, -1126.334355420119088846),
    (34.0, -1160.099157526790564165),
    (34.5, -1194.363743906521086773),
    (35.0, -1229.128120752022504711),
    (35.5, -1264.392293993331553289),
    (36.0, -1300.156269312447366623),
    (36.5, -1336.420052156964153451),
    (37.0, -1373.183647752780633154),
    (37.5, -1410.447061115960206298),
    (38.0, -1448.210297063809014847),
    (38.5, -1486.473360225232936488),
    (39.0, -1525.236255050429073862),
    (39.5, -1564.498985819962371194),
    (40.0, -1604.26155665327355566),
];
